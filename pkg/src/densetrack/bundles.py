"""On-disk scene bundles: PNG images, raw float arrays, and a JSON manifest.

The raw-array format is deliberately dumb: a 13-byte header (magic ``DTRW``,
one dtype code byte, then height/width/channels as little-endian uint32)
followed by the C-order array bytes.  Float maps are stored as little-endian
float32, masks as uint8.  Nothing in a bundle carries a timestamp, so writing
the same scene twice produces byte-identical files.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import DepthMap, Extrinsics, Intrinsics, MotionMap, PointMap
from .synthdata import (
    FrameObs,
    SceneConfig,
    SceneSample,
    VertexTrack,
    make_motion_target,
)

MAGIC = b"DTRW"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_DTYPE_CODES = {v: k for k, v in _DTYPES.items()}
FORMAT_VERSION = 1


def write_raw_map(path: Path, array: np.ndarray) -> None:
    """Write a (H, W) or (H, W, C) array as float32 or uint8 raw bytes."""
    arr = np.asarray(array)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3:
        raise ValueError(f"expected 2D or 3D array, got shape {arr.shape}")
    if arr.dtype == np.bool_:
        arr = arr.astype(np.uint8)
    elif arr.dtype != np.uint8:
        arr = arr.astype("<f4")
    h, w, c = arr.shape
    code = _DTYPE_CODES[np.dtype("u1") if arr.dtype == np.uint8 else np.dtype("<f4")]
    with open(path, "wb") as f:
        f.write(struct.pack("<4sBIII", MAGIC, code, h, w, c))
        f.write(np.ascontiguousarray(arr).tobytes())


def read_raw_map(path: Path) -> np.ndarray:
    """Read a raw map written by write_raw_map; returns (H, W, C)."""
    with open(path, "rb") as f:
        header = f.read(17)
        magic, code, h, w, c = struct.unpack("<4sBIII", header)
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        dtype = _DTYPES.get(code)
        if dtype is None:
            raise ValueError(f"{path}: unknown dtype code {code}")
        data = np.frombuffer(f.read(), dtype=dtype)
    if data.size != h * w * c:
        raise ValueError(f"{path}: payload size {data.size} != {h}x{w}x{c}")
    return data.reshape(h, w, c)


def _rgb_to_png(rgb: np.ndarray, path: Path) -> None:
    arr = np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def _png_to_rgb(path: Path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
    return arr / 255.0


def _camera_dict(K: Intrinsics, pose: Extrinsics) -> dict:
    return {
        "fx": K.fx, "fy": K.fy, "px": K.px, "py": K.py,
        "width": K.width, "height": K.height,
        "rotation": pose.rotation.tolist(),
        "translation": pose.translation.tolist(),
    }


def save_scene_bundle(sample: SceneSample, out_dir: Path) -> None:
    """Write one scene to a directory; deterministic bytes for a fixed sample."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = sample.num_frames

    for t, frame in enumerate(sample.frames):
        _rgb_to_png(frame.rgb, out / f"frame_{t:03d}.png")
        write_raw_map(out / f"depth_{t:03d}.raw", frame.depth.data)
        write_raw_map(out / f"depth_valid_{t:03d}.raw", frame.depth.valid)
        pm = sample.gt_pointmaps[t]
        write_raw_map(out / f"points_{t:03d}.raw", pm.data)
        write_raw_map(out / f"points_valid_{t:03d}.raw", pm.validity())

    pairs = []
    for t in range(n):
        for q in range(n):
            mm = make_motion_target(sample, t, q)
            write_raw_map(out / f"motion_t{t:03d}_q{q:03d}.raw", mm.data)
            write_raw_map(out / f"motion_valid_t{t:03d}_q{q:03d}.raw", mm.valid)
            pairs.append([t, q])

    manifest = {
        "format_version": FORMAT_VERSION,
        "num_frames": n,
        "height": sample.frames[0].rgb.shape[0],
        "width": sample.frames[0].rgb.shape[1],
        "seed": sample.seed,
        "config": dataclasses.asdict(sample.config) if sample.config else None,
        "cameras": [_camera_dict(f.intrinsics, f.extrinsics) for f in sample.frames],
        "motion_pairs": pairs,
        "vertex_tracks": [
            {"positions": tr.positions.tolist(), "visible": tr.visible.tolist()}
            for tr in sample.vertex_tracks
        ],
    }
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")


def load_scene_bundle(bundle_dir: Path) -> SceneSample:
    """Load a bundle written by save_scene_bundle.

    The analytic scene is not reconstructable from disk, so the returned
    sample carries precomputed motion maps instead of a SceneModel.
    """
    bdir = Path(bundle_dir)
    with open(bdir / "manifest.json") as f:
        manifest = json.load(f)
    if manifest["format_version"] != FORMAT_VERSION:
        raise ValueError(f"unsupported bundle version {manifest['format_version']}")
    n = manifest["num_frames"]

    config = None
    if manifest["config"] is not None:
        raw = dict(manifest["config"])
        for key, value in raw.items():
            if isinstance(value, list):
                raw[key] = tuple(value)
        config = SceneConfig(**raw)

    frames, pointmaps = [], []
    for t in range(n):
        cam = manifest["cameras"][t]
        K = Intrinsics(fx=cam["fx"], fy=cam["fy"], px=cam["px"], py=cam["py"],
                       width=cam["width"], height=cam["height"])
        pose = Extrinsics(np.array(cam["rotation"]), np.array(cam["translation"]))
        depth = read_raw_map(bdir / f"depth_{t:03d}.raw")[..., 0].astype(np.float64)
        depth_valid = read_raw_map(bdir / f"depth_valid_{t:03d}.raw")[..., 0] != 0
        frames.append(FrameObs(
            rgb=_png_to_rgb(bdir / f"frame_{t:03d}.png"),
            depth=DepthMap(data=depth, valid=depth_valid),
            intrinsics=K,
            extrinsics=pose,
        ))
        pts = read_raw_map(bdir / f"points_{t:03d}.raw").astype(np.float64)
        pts_valid = read_raw_map(bdir / f"points_valid_{t:03d}.raw")[..., 0] != 0
        pointmaps.append(PointMap(data=pts, source_frame=t, time_frame=t,
                                  coord_frame=0, valid=pts_valid))

    stored_motion = {}
    for t, q in manifest["motion_pairs"]:
        data = read_raw_map(bdir / f"motion_t{t:03d}_q{q:03d}.raw").astype(np.float64)
        valid = read_raw_map(bdir / f"motion_valid_t{t:03d}_q{q:03d}.raw")[..., 0] != 0
        stored_motion[(t, q)] = MotionMap(data=data, valid=valid,
                                          source_time=t, query_time=q)

    tracks = [
        VertexTrack(positions=np.array(tr["positions"], dtype=np.float64),
                    visible=np.array(tr["visible"], dtype=bool))
        for tr in manifest["vertex_tracks"]
    ]
    return SceneSample(frames=frames, gt_pointmaps=pointmaps, vertex_tracks=tracks,
                       config=config, scene=None, seed=manifest["seed"],
                       stored_motion=stored_motion)
