"""Export helpers: ASCII PLY point clouds and trajectory overlay plots."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .geometry import project_points
from .synthdata import SceneSample


def save_ply(path: str | Path, points: np.ndarray, colors: np.ndarray) -> None:
    """ASCII PLY with per-point uchar RGB; colors may be float [0, 1] or uint8."""
    points = np.asarray(points, dtype=np.float64)
    colors = np.asarray(colors)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError(f"points must be (N, 3), got {points.shape}")
    if colors.shape != points.shape:
        raise ValueError(f"colors must match points, got {colors.shape}")
    if colors.dtype != np.uint8:
        colors = np.clip(np.rint(colors * 255.0), 0, 255).astype(np.uint8)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(points)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    for p, c in zip(points, colors):
        lines.append(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {c[0]} {c[1]} {c[2]}")
    Path(path).write_text("\n".join(lines) + "\n")


def pointmap_ply(path: str | Path, points: np.ndarray, rgb: np.ndarray,
                 valid: np.ndarray | None = None) -> int:
    """Write one frame's (H, W, 3) pointmap colored by its image; returns N."""
    if valid is None:
        valid = np.ones(points.shape[:2], dtype=bool)
    save_ply(path, points[valid], rgb[valid])
    return int(valid.sum())


def export_scene_ply(out_dir: str | Path, sample: SceneSample,
                     pointmaps: np.ndarray | None = None) -> list[Path]:
    """One PLY per frame; predicted maps when given, else the ground truth."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for t, frame in enumerate(sample.frames):
        if pointmaps is None:
            pts = sample.gt_pointmaps[t].data
            valid = sample.gt_pointmaps[t].validity()
        else:
            pts = pointmaps[t]
            valid = np.ones(pts.shape[:2], dtype=bool)
        path = out_dir / f"frame_{t:03d}.ply"
        pointmap_ply(path, pts, frame.rgb, valid)
        written.append(path)
    return written


def trajectory_plot(path: str | Path, sample: SceneSample,
                    positions: np.ndarray, valid: np.ndarray,
                    stride: int = 2, min_travel: float = 0.05) -> int:
    """Overlay projected trajectories on frame 0; returns tracks drawn.

    ``positions`` is the (H, W, T, 3) trajectory field in frame-0 camera
    coordinates, so projecting through the first frame's intrinsics places
    every time step in frame-0 pixel space.  Only pixels that travel at
    least ``min_travel`` are drawn (static background would hide the motion).
    """
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    frame0 = sample.frames[0]
    h, w = frame0.rgb.shape[:2]
    if positions.shape[:2] != (h, w) or positions.ndim != 4:
        raise ValueError(f"positions must be (H, W, T, 3), got {positions.shape}")

    travel = np.linalg.norm(positions - positions[:, :, :1], axis=-1).max(axis=-1)
    draw = valid & (travel >= min_travel)
    mask = np.zeros_like(draw)
    mask[::stride, ::stride] = True
    draw = draw & mask

    fig, ax = plt.subplots(figsize=(5, 5))
    ax.imshow(np.clip(frame0.rgb, 0.0, 1.0))
    cmap = plt.get_cmap("plasma")
    t_count = positions.shape[2]
    jj, ii = np.nonzero(draw)
    for j, i in zip(jj, ii):
        track = positions[j, i]  # (T, 3)
        uv, _ = project_points(track, frame0.intrinsics)
        ax.plot(uv[:, 0], uv[:, 1], "-", linewidth=1.0, alpha=0.8,
                color=cmap(0.5))
        for t in range(t_count):
            ax.plot(uv[t, 0], uv[t, 1], ".", markersize=2.5,
                    color=cmap(t / max(t_count - 1, 1)))
    ax.set_xlim(-0.5, w - 0.5)
    ax.set_ylim(h - 0.5, -0.5)
    ax.set_title(f"{len(jj)} tracks, color = time")
    ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return int(len(jj))
