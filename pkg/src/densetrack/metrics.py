"""Track-based 3D motion metrics.

Predicted and ground-truth trajectories are compared after a per-sequence
median scale alignment: monocular predictions are only defined up to scale,
so the prediction is rescaled by s = median ||gt|| / median ||pred|| before
any distances are measured.  The median is the lower middle element for even
counts, i.e. sorted[(n - 1) // 2].

All arrays are numpy float64; shapes are (num_points, num_times, 3) with an
optional (num_points, num_times) validity mask.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import MotionMap, PointMap

DEFAULT_THRESHOLDS = (0.1, 0.3, 0.5, 1.0)


class MetricError(ValueError):
    pass


@dataclass
class TrackSet:
    """Paired ground-truth and predicted 3D trajectories."""

    gt: np.ndarray  # (N, T, 3)
    pred: np.ndarray  # (N, T, 3)
    valid: np.ndarray | None = None  # (N, T) bool

    def __post_init__(self):
        self.gt = np.asarray(self.gt, dtype=np.float64)
        self.pred = np.asarray(self.pred, dtype=np.float64)
        if self.gt.ndim != 3 or self.gt.shape[2] != 3:
            raise MetricError(f"tracks must be (N, T, 3), got {self.gt.shape}")
        if self.gt.shape != self.pred.shape:
            raise MetricError(f"gt/pred shapes differ: {self.gt.shape} vs {self.pred.shape}")
        if self.valid is not None:
            self.valid = np.asarray(self.valid, dtype=bool)
            if self.valid.shape != self.gt.shape[:2]:
                raise MetricError("valid mask shape does not match tracks")

    @property
    def num_points(self) -> int:
        return self.gt.shape[0]

    @property
    def num_times(self) -> int:
        return self.gt.shape[1]

    def validity(self) -> np.ndarray:
        if self.valid is None:
            return np.ones(self.gt.shape[:2], dtype=bool)
        return self.valid


def lower_median(values: np.ndarray) -> float:
    """Median as the lower middle element: sorted[(n - 1) // 2]."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 0:
        raise MetricError("median of empty set")
    return float(v[(v.size - 1) // 2])


def median_scale(ts: TrackSet) -> float:
    """Alignment scale s = median ||gt|| / median ||pred|| over valid entries."""
    mask = ts.validity()
    if not mask.any():
        raise MetricError("no valid track entries")
    gt_norm = np.linalg.norm(ts.gt[mask], axis=-1)
    pred_norm = np.linalg.norm(ts.pred[mask], axis=-1)
    denom = lower_median(pred_norm)
    if denom <= 0.0:
        raise MetricError(f"degenerate prediction: median norm {denom}")
    return lower_median(gt_norm) / denom


def apd(
    ts: TrackSet,
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS,
    scale: float | None = None,
    literal_scaling: bool = False,
) -> float:
    """Average percentage of points within the distance thresholds, in [0, 100].

    The indicator ||s * pred - gt|| < d is averaged over valid (point, time)
    entries and over thresholds, times 100.  ``literal_scaling`` instead
    applies the scale to the ground truth, ||pred - s * gt|| < d, matching a
    common alternative formulation; with s = 1 the two agree.
    """
    if scale is None:
        scale = median_scale(ts)
    mask = ts.validity()
    if not mask.any():
        raise MetricError("no valid track entries")
    if literal_scaling:
        err = np.linalg.norm(ts.pred[mask] - scale * ts.gt[mask], axis=-1)
    else:
        err = np.linalg.norm(scale * ts.pred[mask] - ts.gt[mask], axis=-1)
    hits = np.stack([err < d for d in thresholds], axis=0)
    return 100.0 * float(hits.mean())


def epe(ts: TrackSet, scale: float | None = None) -> float:
    """Mean Euclidean distance ||s * pred - gt|| over valid entries."""
    if scale is None:
        scale = median_scale(ts)
    mask = ts.validity()
    if not mask.any():
        raise MetricError("no valid track entries")
    err = np.linalg.norm(scale * ts.pred[mask] - ts.gt[mask], axis=-1)
    return float(err.mean())


def first_frame_trajectories(
    base: PointMap, motions: list[MotionMap]
) -> tuple[np.ndarray, np.ndarray]:
    """Dense trajectories of the first frame's pixels across query times.

    position(t) = base + motion_to_t, so entry t of ``motions`` must be the
    first frame's motion map with query time t.  Returns the (H, W, T, 3)
    position grid and the (H, W) mask of pixels valid at the base frame and
    at every query time; trackable points need consistent index sets across
    gt and prediction, so callers intersect the two masks before flattening.
    """
    keep = base.validity().copy()
    for mm in motions:
        if mm.data.shape != base.data.shape:
            raise MetricError("motion map shape does not match base pointmap")
        keep &= mm.valid
    traj = np.stack([base.data + mm.data for mm in motions], axis=2)
    return traj, keep


def track_set_from_dense(
    gt_traj: np.ndarray,
    pred_traj: np.ndarray,
    keep: np.ndarray,
) -> TrackSet:
    """Flatten (H, W, T, 3) trajectory grids to a TrackSet on kept pixels."""
    if not keep.any():
        raise MetricError("no jointly valid pixels to track")
    return TrackSet(gt=gt_traj[keep], pred=pred_traj[keep])


@dataclass
class SequenceMetrics:
    apd: float
    epe: float
    scale: float
    num_tracks: int


@dataclass
class EvalSummary:
    """Aggregate metrics over sequences, averaged with equal sequence weight."""

    apd: float
    epe: float
    per_sequence: list[SequenceMetrics] = field(default_factory=list)


def evaluate_track_sets(
    track_sets: list[TrackSet],
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS,
    global_scale: bool = False,
    literal_scaling: bool = False,
) -> EvalSummary:
    """APD / EPE over several sequences.

    Default is a per-sequence alignment scale; ``global_scale`` computes one
    scale from all sequences' pooled norms and applies it everywhere.
    """
    if not track_sets:
        raise MetricError("no track sets to evaluate")
    shared: float | None = None
    if global_scale:
        gt_norms, pred_norms = [], []
        for ts in track_sets:
            mask = ts.validity()
            gt_norms.append(np.linalg.norm(ts.gt[mask], axis=-1))
            pred_norms.append(np.linalg.norm(ts.pred[mask], axis=-1))
        denom = lower_median(np.concatenate(pred_norms))
        if denom <= 0.0:
            raise MetricError(f"degenerate prediction: median norm {denom}")
        shared = lower_median(np.concatenate(gt_norms)) / denom

    rows = []
    for ts in track_sets:
        s = shared if shared is not None else median_scale(ts)
        rows.append(SequenceMetrics(
            apd=apd(ts, thresholds, scale=s, literal_scaling=literal_scaling),
            epe=epe(ts, scale=s),
            scale=s,
            num_tracks=int(ts.validity().any(axis=1).sum()),
        ))
    return EvalSummary(
        apd=float(np.mean([r.apd for r in rows])),
        epe=float(np.mean([r.epe for r in rows])),
        per_sequence=rows,
    )
