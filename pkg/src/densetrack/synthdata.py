"""Procedural dynamic scenes with analytically exact ground truth.

Scenes are built from rigid spheres (translating and spinning) over a static
ground plane and backdrop, ray-cast in closed form so depth, pointmaps, and
motion fields are exact to double precision.  World coordinates follow the
first camera's convention: x right, y down, z forward; the ground plane sits
at y = PLANE_Y and the backdrop at z = BACKDROP_Z.

Everything is deterministic given the config seed: one ``numpy`` Generator
drives all sampling and rendering is pure array math.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    DepthMap,
    Extrinsics,
    Intrinsics,
    MotionMap,
    PointMap,
    look_at,
    motion_field,
    pixel_grid,
    project_points,
    transform_pointmap,
    unproject_depthmap,
)

PLANE_Y = 0.9
BACKDROP_Z = 6.5
SCENE_TARGET = np.array([0.0, 0.15, 3.4])
LIGHT_DIR = np.array([0.25, 0.9, 0.35]) / np.linalg.norm([0.25, 0.9, 0.35])
OCCLUSION_SLACK = 1e-6
CAMERA_CLEARANCE = 0.25

SPHERE_PALETTE = np.array([
    [0.90, 0.25, 0.20],
    [0.20, 0.55, 0.90],
    [0.95, 0.75, 0.15],
    [0.35, 0.80, 0.35],
    [0.75, 0.30, 0.80],
    [0.20, 0.80, 0.75],
    [0.95, 0.45, 0.60],
    [0.60, 0.60, 0.25],
])


class SceneGenerationError(RuntimeError):
    """Raised when a valid scene layout cannot be sampled."""


@dataclass(frozen=True)
class SceneConfig:
    """Knobs for one generated scene."""

    num_frames: int = 4
    height: int = 32
    width: int = 32
    patch_size: int = 8
    num_spheres: int = 3
    radius_range: tuple[float, float] = (0.3, 0.55)
    motion_range: tuple[float, float] = (0.05, 0.22)
    spin_range: tuple[float, float] = (0.0, 0.5)
    camera: str = "static"  # static | orbit | linear
    ground_plane: bool = True
    num_track_vertices: int = 48
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.num_frames <= 16:
            raise ValueError(f"num_frames must be in [2, 16], got {self.num_frames}")
        if self.height % self.patch_size or self.width % self.patch_size:
            raise ValueError(
                f"image size {self.height}x{self.width} not a multiple of patch "
                f"size {self.patch_size}"
            )
        if self.camera not in ("static", "orbit", "linear"):
            raise ValueError(f"unknown camera trajectory {self.camera!r}")
        if self.num_spheres < 0:
            raise ValueError("num_spheres must be >= 0")


@dataclass
class Sphere:
    """Rigid sphere: linear center trajectory plus spin about its own axis."""

    center0: np.ndarray
    velocity: np.ndarray
    radius: float
    spin_axis: np.ndarray
    spin_rate: float
    color: np.ndarray
    stripe_freq: float
    stripe_phase: float

    def center(self, t: float) -> np.ndarray:
        return self.center0 + self.velocity * t

    def rotation(self, t: float) -> np.ndarray:
        return rotation_about_axis(self.spin_axis, self.spin_rate * t)


@dataclass
class SceneModel:
    """Analytic scene description: cameras plus rigid objects."""

    spheres: list[Sphere]
    ground_plane: bool
    intrinsics: list[Intrinsics]
    extrinsics: list[Extrinsics]
    num_frames: int

    def material_to_world(self, obj: np.ndarray, material: np.ndarray, t: int) -> np.ndarray:
        """World position at time t of material points (obj >= 0 required)."""
        out = np.array(material, dtype=np.float64, copy=True)
        for s_idx, sph in enumerate(self.spheres):
            sel = obj == s_idx
            if np.any(sel):
                R = sph.rotation(t)
                out[sel] = material[sel] @ R.T + sph.center(t)
        # plane / backdrop material points are static world points already
        return out


@dataclass
class FrameObs:
    """One rendered frame: image, exact depth, camera, and hit bookkeeping."""

    rgb: np.ndarray
    depth: DepthMap
    intrinsics: Intrinsics
    extrinsics: Extrinsics
    hit_object: np.ndarray | None = None  # -1 none, 0..S-1 spheres, S ground, S+1 backdrop
    material: np.ndarray | None = None  # HxWx3 material coordinates of the hit


@dataclass
class VertexTrack:
    """World-space trajectory of one tracked surface point."""

    positions: np.ndarray  # (num_frames, 3)
    visible: np.ndarray  # (num_frames,) bool


@dataclass
class SceneSample:
    """A full scene: frames, ground-truth pointmaps, tracks, and provenance."""

    frames: list[FrameObs]
    gt_pointmaps: list[PointMap]
    vertex_tracks: list[VertexTrack]
    config: SceneConfig | None = None
    scene: SceneModel | None = None
    seed: int | None = None
    stored_motion: dict[tuple[int, int], MotionMap] = field(default_factory=dict)

    @property
    def num_frames(self) -> int:
        return len(self.frames)


def rotation_about_axis(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix about a (not necessarily unit) axis."""
    a = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(a)
    if n < 1e-12:
        return np.eye(3)
    ax, ay, az = a / n
    K = np.array([[0.0, -az, ay], [az, 0.0, -ax], [-ay, ax, 0.0]])
    return np.eye(3) + math.sin(angle) * K + (1.0 - math.cos(angle)) * (K @ K)


def fibonacci_sphere(n: int, radius: float) -> np.ndarray:
    """n roughly-uniform points on a sphere of the given radius."""
    k = np.arange(n, dtype=np.float64) + 0.5
    phi = np.arccos(1.0 - 2.0 * k / n)
    theta = math.pi * (1.0 + math.sqrt(5.0)) * k
    return radius * np.stack(
        [np.sin(phi) * np.cos(theta), np.sin(phi) * np.sin(theta), np.cos(phi)], axis=-1
    )


def _camera_path(cfg: SceneConfig, rng: np.random.Generator) -> list[Extrinsics]:
    base = np.array([0.0, -0.25, 0.0])
    if cfg.camera == "static":
        centers = [base] * cfg.num_frames
    elif cfg.camera == "linear":
        vel = np.array([rng.uniform(-0.12, 0.12), rng.uniform(-0.04, 0.04),
                        rng.uniform(-0.05, 0.05)])
        centers = [base + t * vel for t in range(cfg.num_frames)]
    else:  # orbit about the vertical axis through the scene target
        offset = base - SCENE_TARGET
        step = rng.choice([-1.0, 1.0]) * rng.uniform(0.03, 0.08)
        centers = [
            SCENE_TARGET + rotation_about_axis(np.array([0.0, 1.0, 0.0]), step * t) @ offset
            for t in range(cfg.num_frames)
        ]
    return [look_at(c, SCENE_TARGET) for c in centers]


def _sample_spheres(cfg: SceneConfig, rng: np.random.Generator) -> list[Sphere]:
    spheres = []
    for s_idx in range(cfg.num_spheres):
        radius = float(rng.uniform(*cfg.radius_range))
        y_hi = PLANE_Y - radius  # rest on or float above the ground
        center = np.array([
            rng.uniform(-1.2, 1.2),
            rng.uniform(min(-0.6, y_hi), y_hi),
            rng.uniform(2.4, 4.4),
        ])
        speed = float(rng.uniform(*cfg.motion_range))
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        spin_axis = rng.normal(size=3)
        spheres.append(
            Sphere(
                center0=center,
                velocity=speed * direction,
                radius=radius,
                spin_axis=spin_axis,
                spin_rate=float(rng.uniform(*cfg.spin_range)),
                color=SPHERE_PALETTE[s_idx % len(SPHERE_PALETTE)].copy(),
                stripe_freq=float(rng.uniform(4.0, 9.0)),
                stripe_phase=float(rng.uniform(0.0, 2.0 * math.pi)),
            )
        )
    return spheres


def _camera_clear_of_spheres(scene: SceneModel) -> bool:
    for t, pose in enumerate(scene.extrinsics):
        c = pose.camera_center()
        for sph in scene.spheres:
            if np.linalg.norm(c - sph.center(t)) <= sph.radius + CAMERA_CLEARANCE:
                return False
    return True


def _checker(a: np.ndarray, b: np.ndarray, size: float,
             c0: np.ndarray, c1: np.ndarray) -> np.ndarray:
    parity = (np.floor(a / size) + np.floor(b / size)).astype(np.int64) % 2
    return np.where(parity[..., None] == 0, c0, c1)


def _ray_hits(scene: SceneModel, origin: np.ndarray, dirs: np.ndarray,
              t: float) -> tuple[np.ndarray, np.ndarray]:
    """Nearest intersection of rays ``origin + s * dirs`` with the time-t scene.

    Returns (s, obj): ray parameters (inf where no hit) and winning object ids
    (-1 none, 0..S-1 spheres, S ground, S+1 backdrop).
    """
    shape = dirs.shape[:-1]
    best_s = np.full(shape, np.inf)
    best_obj = np.full(shape, -1, dtype=np.int32)

    a = np.sum(dirs * dirs, axis=-1)
    for s_idx, sph in enumerate(scene.spheres):
        oc = origin - sph.center(t)
        b = 2.0 * np.sum(dirs * oc, axis=-1)
        c = float(oc @ oc) - sph.radius**2
        disc = b * b - 4.0 * a * c
        hit = (disc >= 0.0) & (a > 0.0)
        sqrt_disc = np.sqrt(np.where(hit, disc, 0.0))
        denom = np.where(hit, 2.0 * a, 1.0)
        s_near = (-b - sqrt_disc) / denom
        s_far = (-b + sqrt_disc) / denom
        s_hit = np.where(s_near > 1e-9, s_near, s_far)
        ok = hit & (s_hit > 1e-9) & (s_hit < best_s)
        best_s = np.where(ok, s_hit, best_s)
        best_obj = np.where(ok, s_idx, best_obj)

    if scene.ground_plane:
        n_spheres = len(scene.spheres)
        dy = dirs[..., 1]
        with np.errstate(divide="ignore", invalid="ignore"):
            s_pl = (PLANE_Y - origin[1]) / dy
        ok = (dy != 0) & (s_pl > 1e-9) & (s_pl < best_s)
        best_s = np.where(ok, s_pl, best_s)
        best_obj = np.where(ok, n_spheres, best_obj)

        dz = dirs[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            s_bd = (BACKDROP_Z - origin[2]) / dz
        ok = (dz != 0) & (s_bd > 1e-9) & (s_bd < best_s)
        best_s = np.where(ok, s_bd, best_s)
        best_obj = np.where(ok, n_spheres + 1, best_obj)

    return best_s, best_obj


def _shade(scene: SceneModel, obj: np.ndarray, world: np.ndarray, material: np.ndarray,
           t: float) -> np.ndarray:
    """Procedural albedo + Lambert shading for hit points."""
    rgb = np.zeros(obj.shape + (3,))
    normal = np.zeros(obj.shape + (3,))
    n_spheres = len(scene.spheres)

    for s_idx, sph in enumerate(scene.spheres):
        sel = obj == s_idx
        if not np.any(sel):
            continue
        normal[sel] = (world[sel] - sph.center(t)) / sph.radius
        # stripes anchored to material coordinates so spin is visible
        m = material[sel] / sph.radius
        tex = 0.65 + 0.35 * np.sin(sph.stripe_freq * (m[:, 0] + m[:, 1] + m[:, 2])
                                   + sph.stripe_phase)
        rgb[sel] = sph.color * tex[:, None]

    ground_sel = obj == n_spheres
    if np.any(ground_sel):
        normal[ground_sel] = np.array([0.0, -1.0, 0.0])
        w = world[ground_sel]
        rgb[ground_sel] = _checker(w[:, 0], w[:, 2], 0.45,
                                   np.array([0.70, 0.68, 0.62]),
                                   np.array([0.35, 0.33, 0.30]))

    back_sel = obj == n_spheres + 1
    if np.any(back_sel):
        normal[back_sel] = np.array([0.0, 0.0, -1.0])
        w = world[back_sel]
        rgb[back_sel] = _checker(w[:, 0], w[:, 1], 0.8,
                                 np.array([0.45, 0.52, 0.62]),
                                 np.array([0.30, 0.36, 0.46]))

    lambert = np.clip(np.sum(normal * -LIGHT_DIR, axis=-1), 0.0, 1.0)
    shaded = rgb * (0.35 + 0.65 * lambert[..., None])
    return np.clip(shaded, 0.0, 1.0)


def render_frame(scene: SceneModel, t: int, K: Intrinsics, pose: Extrinsics) -> FrameObs:
    """Ray-cast one frame, returning exact depth and per-pixel hit bookkeeping."""
    ii, jj = pixel_grid(K.width, K.height)
    d_cam = np.stack([(ii - K.px) / K.fx, (jj - K.py) / K.fy, np.ones_like(ii)], axis=-1)
    dirs = d_cam @ pose.rotation  # R^T applied row-wise
    origin = pose.camera_center()

    s, obj = _ray_hits(scene, origin, dirs, t)
    valid = obj >= 0
    depth = np.where(valid, s, 0.0)
    world = origin + depth[..., None] * dirs

    material = np.array(world, copy=True)
    for s_idx, sph in enumerate(scene.spheres):
        sel = obj == s_idx
        if np.any(sel):
            material[sel] = (world[sel] - sph.center(t)) @ sph.rotation(t)

    flat_rgb = _shade(scene, obj, world, material, t)
    rgb = np.where(valid[..., None], flat_rgb, np.array([0.08, 0.08, 0.10]))

    return FrameObs(
        rgb=rgb,
        depth=DepthMap(data=depth, valid=valid),
        intrinsics=K,
        extrinsics=pose,
        hit_object=obj,
        material=material,
    )


def pointmap_at_time(sample: SceneSample, source: int, time: int) -> PointMap:
    """Positions of frame ``source``'s pixels at frame ``time``, in frame-0 coords."""
    scene = sample.scene
    if scene is None:
        raise ValueError("sample has no analytic scene attached; cannot move points in time")
    frame = sample.frames[source]
    if frame.hit_object is None or frame.material is None:
        raise ValueError("frame lacks hit bookkeeping")
    valid = frame.hit_object >= 0
    world = scene.material_to_world(frame.hit_object, frame.material, time)
    pose0 = sample.frames[0].extrinsics
    data = world @ pose0.rotation.T + pose0.translation
    data = np.where(valid[..., None], data, 0.0)
    return PointMap(data=data, source_frame=source, time_frame=time, coord_frame=0,
                    valid=valid)


def _points_visible(scene: SceneModel, world_pts: np.ndarray, q: int,
                    K: Intrinsics, pose: Extrinsics) -> np.ndarray:
    """Frustum + occlusion visibility of world points from camera q.

    A point is visible iff it projects inside the image with positive depth
    and no scene surface lies nearer than it along the viewing ray (distance
    slack OCCLUSION_SLACK).
    """
    pts = world_pts.reshape(-1, 3)
    cam = pose.world_to_camera(pts)
    z = cam[:, 2]
    in_front = z > 1e-9
    u = np.where(in_front, K.fx * cam[:, 0] / np.where(in_front, z, 1.0) + K.px, -1.0)
    v = np.where(in_front, K.fy * cam[:, 1] / np.where(in_front, z, 1.0) + K.py, -1.0)
    in_frustum = in_front & (u >= 0) & (u <= K.width - 1) & (v >= 0) & (v <= K.height - 1)

    origin = pose.camera_center()
    dirs = pts - origin
    dist = np.linalg.norm(dirs, axis=-1)
    degenerate = dist < 1e-12  # point at the camera center, never visible
    dirs = np.where(degenerate[..., None], np.array([0.0, 0.0, 1.0]), dirs)
    s_hit, obj = _ray_hits(scene, origin, dirs, q)
    # parameterised so the point itself sits at s = 1
    dist_safe = np.where(degenerate, 1.0, dist)
    hit_dist = np.where(np.isfinite(s_hit), s_hit * dist_safe, np.inf)
    unoccluded = hit_dist >= dist - OCCLUSION_SLACK
    return (in_frustum & unoccluded & ~degenerate).reshape(world_pts.shape[:-1])


def make_motion_target(sample: SceneSample, t: int, q: int) -> MotionMap:
    """Dense frame-t -> frame-q motion in frame-0 coordinates.

    Valid where the pixel renders at t and its surface point is visible
    (in-frustum and unoccluded) at q.
    """
    if not (0 <= t < sample.num_frames and 0 <= q < sample.num_frames):
        raise IndexError(f"frame indices ({t}, {q}) out of range")
    if sample.scene is None:
        key = (t, q)
        if key in sample.stored_motion:
            return sample.stored_motion[key]
        raise ValueError("sample has neither analytic scene nor stored motion maps")

    x_t = pointmap_at_time(sample, source=t, time=t)
    x_q = pointmap_at_time(sample, source=t, time=q)
    motion = motion_field(x_q, x_t)

    if t != q:
        # t == q needs no re-cast: a rendered pixel is visible by construction,
        # and grazing rays make the recomputed mask flicker at silhouettes
        frame = sample.frames[t]
        world_q = sample.scene.material_to_world(frame.hit_object, frame.material, q)
        vis_q = _points_visible(sample.scene, world_q, q, sample.frames[q].intrinsics,
                                sample.frames[q].extrinsics)
        motion.valid &= vis_q
    motion.data = np.where(motion.valid[..., None], motion.data, 0.0)
    return motion


def _vertex_tracks(scene: SceneModel, cfg: SceneConfig,
                   rng: np.random.Generator) -> list[VertexTrack]:
    """Surface-point trajectories: sphere lattice vertices plus ground anchors."""
    tracks = []
    anchors: list[tuple[int, np.ndarray]] = []
    for s_idx, sph in enumerate(scene.spheres):
        for m in fibonacci_sphere(cfg.num_track_vertices, sph.radius):
            anchors.append((s_idx, m))
    if scene.ground_plane:
        n_ground = max(4, cfg.num_track_vertices // 4)
        gx = rng.uniform(-1.4, 1.4, size=n_ground)
        gz = rng.uniform(2.2, 5.0, size=n_ground)
        for x, z in zip(gx, gz):
            anchors.append((len(scene.spheres), np.array([x, PLANE_Y, z])))

    for obj_id, m in anchors:
        positions = np.stack([
            scene.material_to_world(np.array([obj_id]), m[None, :], t)[0]
            for t in range(cfg.num_frames)
        ])
        visible = np.array([
            _points_visible(scene, positions[t][None, :], t,
                            scene.intrinsics[t], scene.extrinsics[t])[0]
            for t in range(cfg.num_frames)
        ])
        tracks.append(VertexTrack(positions=positions, visible=visible))
    return tracks


def generate_scene(cfg: SceneConfig) -> SceneSample:
    """Generate one deterministic scene; bit-reproducible for a fixed seed."""
    rng = np.random.default_rng(cfg.seed)
    fov = rng.uniform(math.radians(50), math.radians(70))
    fx = cfg.width / (2.0 * math.tan(fov / 2.0))
    fy = fx * rng.uniform(0.92, 1.08)
    K = Intrinsics(
        fx=fx,
        fy=fy,
        px=cfg.width * rng.uniform(0.46, 0.54),
        py=cfg.height * rng.uniform(0.46, 0.54),
        width=cfg.width,
        height=cfg.height,
    )
    extrinsics = _camera_path(cfg, rng)

    scene = None
    for _ in range(10):
        candidate = SceneModel(
            spheres=_sample_spheres(cfg, rng),
            ground_plane=cfg.ground_plane,
            intrinsics=[K] * cfg.num_frames,
            extrinsics=extrinsics,
            num_frames=cfg.num_frames,
        )
        if _camera_clear_of_spheres(candidate):
            scene = candidate
            break
    if scene is None:
        raise SceneGenerationError(
            f"could not place {cfg.num_spheres} spheres clear of the camera in 10 attempts"
        )

    frames = [render_frame(scene, t, K, extrinsics[t]) for t in range(cfg.num_frames)]
    sample = SceneSample(frames=frames, gt_pointmaps=[], vertex_tracks=[],
                         config=cfg, scene=scene, seed=cfg.seed)
    sample.gt_pointmaps = [pointmap_at_time(sample, source=t, time=t)
                           for t in range(cfg.num_frames)]
    sample.vertex_tracks = _vertex_tracks(scene, cfg, rng)
    return sample


def sparse_motion_targets(
    vertex_tracks: list[VertexTrack],
    cameras: list[tuple[Intrinsics, Extrinsics]],
    t: int,
    q: int,
    reference: Extrinsics | None = None,
) -> list[tuple[tuple[int, int], np.ndarray]]:
    """Sparse supervision: integer pixels of frame t with frame-0 displacements.

    Each vertex visible at both t and q is projected with camera t and rounded
    to the nearest integer pixel; its displacement position_q - position_t is
    re-expressed in the reference (default frame-0) camera's orientation.
    When several vertices round to one pixel the nearest (smallest depth) wins.
    """
    K_t, pose_t = cameras[t]
    ref_rot = (reference or cameras[0][1]).rotation
    best: dict[tuple[int, int], tuple[float, np.ndarray]] = {}
    for track in vertex_tracks:
        if not (track.visible[t] and track.visible[q]):
            continue
        cam_pt = pose_t.world_to_camera(track.positions[t])
        if cam_pt[2] <= 0:
            continue
        pix, depth = project_points(cam_pt, K_t)
        i = int(np.rint(pix[0]))
        j = int(np.rint(pix[1]))
        if not (0 <= i < K_t.width and 0 <= j < K_t.height):
            continue
        disp = ref_rot @ (track.positions[q] - track.positions[t])
        prev = best.get((i, j))
        if prev is None or depth < prev[0]:
            best[(i, j)] = (float(depth), disp)
    return [(pix, disp) for pix, (_, disp) in sorted(best.items())]


@dataclass(frozen=True)
class AugmentationSpec:
    """Sequence-level augmentation: photometric jitter plus center crop."""

    brightness: float = 0.0
    contrast: float = 0.0
    saturation: float = 0.0
    aspect_range: tuple[float, float] = (1.0, 1.0)
    crop_scale_range: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        lo, hi = self.crop_scale_range
        if not (0.0 < lo <= hi <= 1.0):
            raise ValueError(f"crop scale range must lie in (0, 1], got {self.crop_scale_range}")

    @classmethod
    def identity(cls) -> "AugmentationSpec":
        return cls()


def crop_intrinsics(K: Intrinsics, sx: float, sy: float) -> Intrinsics:
    """Intrinsics after a centered crop to fractions (sx, sy), resized back."""
    if not (0.0 < sx <= 1.0 and 0.0 < sy <= 1.0):
        raise ValueError(f"degenerate crop fractions ({sx}, {sy})")
    if sx == 1.0 and sy == 1.0:
        return K
    w_crop = sx * K.width
    h_crop = sy * K.height
    off_x = (K.width - w_crop) / 2.0
    off_y = (K.height - h_crop) / 2.0
    return Intrinsics(
        fx=K.fx * K.width / w_crop,
        fy=K.fy * K.height / h_crop,
        px=(K.px - off_x) * K.width / w_crop,
        py=(K.py - off_y) * K.height / h_crop,
        width=K.width,
        height=K.height,
    )


def _color_jitter(rgb: np.ndarray, b: float, c: float, s: float) -> np.ndarray:
    out = rgb
    if b != 1.0:
        out = out * b
    if c != 1.0:
        out = out.mean() + (out - out.mean()) * c
    if s != 1.0:
        gray = out @ np.array([0.299, 0.587, 0.114])
        out = gray[..., None] + (out - gray[..., None]) * s
    if b != 1.0 or c != 1.0 or s != 1.0:
        out = np.clip(out, 0.0, 1.0)
    return out


def augment(sample: SceneSample, spec: AugmentationSpec, seed: int) -> SceneSample:
    """Re-render the sequence under jittered intrinsics and photometric factors.

    One parameter draw applies to every frame.  Geometric ground truth is
    re-derived exactly by ray-casting with the cropped intrinsics, so
    unproject-consistency is preserved by construction.
    """
    if sample.scene is None:
        raise ValueError("augmentation requires the analytic scene (generated samples only)")
    rng = np.random.default_rng(seed)
    b = float(rng.uniform(max(0.0, 1.0 - spec.brightness), 1.0 + spec.brightness))
    c = float(rng.uniform(max(0.0, 1.0 - spec.contrast), 1.0 + spec.contrast))
    s = float(rng.uniform(max(0.0, 1.0 - spec.saturation), 1.0 + spec.saturation))
    aspect = float(rng.uniform(*spec.aspect_range))
    scale = float(rng.uniform(*spec.crop_scale_range))
    sx = min(1.0, scale * math.sqrt(aspect))
    sy = min(1.0, scale / math.sqrt(aspect))

    old = sample.scene
    new_K = [crop_intrinsics(K, sx, sy) for K in old.intrinsics]
    scene = SceneModel(
        spheres=old.spheres,
        ground_plane=old.ground_plane,
        intrinsics=new_K,
        extrinsics=old.extrinsics,
        num_frames=old.num_frames,
    )
    frames = []
    for t in range(old.num_frames):
        frame = render_frame(scene, t, new_K[t], old.extrinsics[t])
        frame.rgb = _color_jitter(frame.rgb, b, c, s)
        frames.append(frame)
    out = SceneSample(frames=frames, gt_pointmaps=[], vertex_tracks=[],
                      config=sample.config, scene=scene, seed=sample.seed)
    out.gt_pointmaps = [pointmap_at_time(out, source=t, time=t)
                        for t in range(old.num_frames)]
    out.vertex_tracks = [
        VertexTrack(
            positions=track.positions,
            visible=np.array([
                _points_visible(scene, track.positions[t][None, :], t,
                                new_K[t], old.extrinsics[t])[0]
                for t in range(old.num_frames)
            ]),
        )
        for track in sample.vertex_tracks
    ]
    return out


@dataclass
class DatasetSpec:
    """A registered pool of scenes for the sequence sampler.

    Pose-only pools (no usable trajectories) are drawn half as often.
    """

    name: str
    scenes: list[SceneSample]
    stride_range: tuple[int, int] = (1, 4)
    has_tracks: bool = True

    @property
    def weight(self) -> float:
        return 1.0 if self.has_tracks else 0.5


@dataclass
class SequenceDraw:
    """One sampled training sequence: scene, frame indices, and query slot."""

    dataset: str
    scene: SceneSample
    frame_indices: list[int]
    query_pos: int


def sample_batch(
    datasets: list[DatasetSpec],
    rng: np.random.Generator,
    length_range: tuple[int, int] = (2, 10),
    max_tries: int = 50,
) -> SequenceDraw:
    """Draw a training subsequence: length U{2..10}, stride U{1..4}, uniform query.

    Strides infeasible for the drawn length in the drawn scene trigger a
    scene resample (the length itself is preserved so its distribution stays
    uniform); an error is raised if no registered scene can host the length.
    """
    if not datasets:
        raise ValueError("no datasets registered")
    weights = np.array([d.weight for d in datasets], dtype=np.float64)
    probs = weights / weights.sum()

    length = int(rng.integers(length_range[0], length_range[1] + 1))
    for _ in range(max_tries):
        ds = datasets[int(rng.choice(len(datasets), p=probs))]
        scene = ds.scenes[int(rng.integers(len(ds.scenes)))]
        lo, hi = ds.stride_range
        feasible = [s for s in range(lo, hi + 1)
                    if (length - 1) * s + 1 <= scene.num_frames]
        if not feasible:
            continue
        stride = int(feasible[int(rng.integers(len(feasible)))])
        span = (length - 1) * stride + 1
        start = int(rng.integers(scene.num_frames - span + 1))
        indices = list(range(start, start + span, stride))
        query_pos = int(rng.integers(length))
        return SequenceDraw(dataset=ds.name, scene=scene, frame_indices=indices,
                            query_pos=query_pos)
    raise SceneGenerationError(
        f"no registered scene can host a length-{length} sequence"
    )


@dataclass
class TrainingSequence:
    """Ground truth for one sampled subsequence, re-indexed to its first frame.

    Pointmaps, motion, and camera parameters are expressed relative to the
    subsequence's first frame, matching the model's output convention.
    """

    rgb: np.ndarray  # (L, H, W, 3) float
    intrinsics: list[Intrinsics]
    extrinsics: list[Extrinsics]  # relative poses: frame k w.r.t. subsequence frame 0
    pointmaps: np.ndarray  # (L, H, W, 3) in subsequence frame-0 coordinates
    point_valid: np.ndarray  # (L, H, W)
    depths: np.ndarray  # (L, H, W)
    depth_valid: np.ndarray  # (L, H, W)
    motion: np.ndarray  # (L, H, W, 3) frame k -> query, frame-0 coordinates
    motion_valid: np.ndarray  # (L, H, W)
    query_pos: int


def extract_training_sequence(draw: SequenceDraw) -> TrainingSequence:
    """Materialise ground truth for a SequenceDraw in its own frame-0 coords."""
    scene = draw.scene
    idxs = draw.frame_indices
    ref_pose = scene.frames[idxs[0]].extrinsics
    scene_ref = scene.frames[0].extrinsics
    q_scene = idxs[draw.query_pos]

    rgb, K_list, rel_poses = [], [], []
    pms, pm_valid, depths, depth_valid, motions, motion_valid = [], [], [], [], [], []
    for k, t in enumerate(idxs):
        frame = scene.frames[t]
        rgb.append(frame.rgb)
        K_list.append(frame.intrinsics)
        R_rel = frame.extrinsics.rotation @ ref_pose.rotation.T
        t_rel = frame.extrinsics.translation - R_rel @ ref_pose.translation
        rel_poses.append(Extrinsics(R_rel, t_rel))

        pm = transform_pointmap(scene.gt_pointmaps[t], scene_ref, ref_pose, dst_frame=0)
        pms.append(pm.data)
        pm_valid.append(pm.validity())
        depths.append(frame.depth.data)
        depth_valid.append(frame.depth.valid)

        mm = make_motion_target(scene, t, q_scene)
        R = ref_pose.rotation @ scene_ref.rotation.T
        motions.append(mm.data @ R.T)
        motion_valid.append(mm.valid)

    return TrainingSequence(
        rgb=np.stack(rgb),
        intrinsics=K_list,
        extrinsics=rel_poses,
        pointmaps=np.stack(pms),
        point_valid=np.stack(pm_valid),
        depths=np.stack(depths),
        depth_valid=np.stack(depth_valid),
        motion=np.stack(motions),
        motion_valid=np.stack(motion_valid),
        query_pos=draw.query_pos,
    )
