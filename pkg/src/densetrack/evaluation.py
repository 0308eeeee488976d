"""Trajectory evaluation on synthetic scenes.

Predictors turn a scene into dense first-frame trajectories; the metrics
module scores them against the analytic ground truth.  The oracle and
zero-motion predictors bracket a trained model: the oracle pins the metric
ceiling, the zero-motion ablation is the static-world floor any useful
motion head must beat.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np
import torch

from .metrics import (
    DEFAULT_THRESHOLDS,
    EvalSummary,
    MetricError,
    TrackSet,
    evaluate_track_sets,
    first_frame_trajectories,
    track_set_from_dense,
)
from .model import DenseTracker, intrinsic_features
from .synthdata import SceneSample, make_motion_target


@dataclass
class TrajectoryField:
    """Dense per-pixel trajectories of the first frame across all times."""

    positions: np.ndarray  # (H, W, T, 3), frame-0 coordinates
    valid: np.ndarray  # (H, W)


class ScenePredictor(Protocol):
    def predict(self, sample: SceneSample) -> TrajectoryField: ...


def gt_trajectories(sample: SceneSample) -> TrajectoryField:
    """Analytic trajectories of frame 0's pixels at every frame time."""
    base = sample.gt_pointmaps[0]
    motions = [make_motion_target(sample, 0, q) for q in range(sample.num_frames)]
    traj, keep = first_frame_trajectories(base, motions)
    return TrajectoryField(positions=traj, valid=keep)


class OraclePredictor:
    """Emits the ground truth itself; pins the metric ceiling exactly."""

    def predict(self, sample: SceneSample) -> TrajectoryField:
        return gt_trajectories(sample)


class ModelPredictor:
    """Dense trajectories from a trained model, one forward pass per query time.

    The position of frame 0's pixels at time q is the frame-0 pointmap plus
    the frame-0 motion map from the run whose query frame is q.  With
    ``zero_motion`` the same passes run but the displacement is discarded,
    which is the static-world ablation (motion identically zero).
    """

    def __init__(self, model: DenseTracker, *, zero_motion: bool = False):
        self.model = model
        self.zero_motion = zero_motion

    def predict(self, sample: SceneSample) -> TrajectoryField:
        dtype = torch.get_default_dtype()
        rgb = np.stack([f.rgb for f in sample.frames])
        images = torch.from_numpy(
            np.ascontiguousarray(rgb.transpose(0, 3, 1, 2))).to(dtype)
        feats = intrinsic_features([f.intrinsics for f in sample.frames])

        slices = []
        was_training = self.model.training
        self.model.eval()
        with torch.no_grad():
            for q in range(sample.num_frames):
                out = self.model(images, feats, query_index=q)
                pos = out.points[0]
                if not self.zero_motion:
                    pos = pos + out.motion[0]
                slices.append(pos.double().numpy())
        if was_training:
            self.model.train()

        positions = np.stack(slices, axis=2)
        h, w = positions.shape[:2]
        return TrajectoryField(positions=positions,
                               valid=np.ones((h, w), dtype=bool))


def scene_track_set(sample: SceneSample, predictor: ScenePredictor) -> TrackSet:
    """Paired gt/predicted trajectories on the jointly valid pixels."""
    gt = gt_trajectories(sample)
    pred = predictor.predict(sample)
    if pred.positions.shape != gt.positions.shape:
        raise MetricError(f"prediction shape {pred.positions.shape} does not "
                          f"match ground truth {gt.positions.shape}")
    keep = gt.valid & pred.valid
    return track_set_from_dense(gt.positions, pred.positions, keep)


def evaluate_scenes(
    samples: list[SceneSample],
    predictor: ScenePredictor,
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS,
    global_scale: bool = False,
    literal_scaling: bool = False,
) -> EvalSummary:
    track_sets = [scene_track_set(s, predictor) for s in samples]
    return evaluate_track_sets(track_sets, thresholds=thresholds,
                               global_scale=global_scale,
                               literal_scaling=literal_scaling)


@dataclass
class MotionError:
    """Displacement error pooled over scenes, next to the gt motion size."""

    epe: float  # mean || pred displacement - gt displacement ||
    mean_gt_magnitude: float  # mean || gt displacement || over the same entries

    @property
    def ratio(self) -> float:
        if self.mean_gt_magnitude == 0.0:
            raise MetricError("no ground-truth motion to compare against")
        return self.epe / self.mean_gt_magnitude


def predicted_pointmaps(model: DenseTracker, sample: SceneSample) -> np.ndarray:
    """Per-frame pointmaps (F, H, W, 3) from one query-free forward pass."""
    dtype = torch.get_default_dtype()
    rgb = np.stack([f.rgb for f in sample.frames])
    images = torch.from_numpy(
        np.ascontiguousarray(rgb.transpose(0, 3, 1, 2))).to(dtype)
    feats = intrinsic_features([f.intrinsics for f in sample.frames])
    was_training = model.training
    model.eval()
    with torch.no_grad():
        out = model(images, feats)
    if was_training:
        model.train()
    return out.points.double().numpy()


def reconstruction_track_set(
    sample: SceneSample,
    pointmaps: np.ndarray,
    depth_filter: tuple[float, float] | None = None,
) -> TrackSet:
    """Per-frame pointmap agreement as a track set: rows are pixels, columns
    frames.

    There is no cross-frame correspondence here (pixel n of frame t is just
    pixel n of frame t), so it scores reconstruction, not tracking.  An
    optional (min, max) gt-depth band drops pixels outside the working range.
    """
    f = sample.num_frames
    gt = np.stack([pm.data for pm in sample.gt_pointmaps], axis=2)
    valid = np.stack([pm.validity() for pm in sample.gt_pointmaps], axis=2)
    if pointmaps.shape != (f,) + gt.shape[:2] + (3,):
        raise MetricError(f"pointmap stack has shape {pointmaps.shape}, "
                          f"expected {(f,) + gt.shape[:2] + (3,)}")
    if depth_filter is not None:
        lo, hi = depth_filter
        if not 0 <= lo < hi:
            raise MetricError(f"bad depth filter ({lo}, {hi})")
        depth = np.stack([fr.depth.data for fr in sample.frames], axis=2)
        valid = valid & (depth >= lo) & (depth <= hi)
    pred = np.moveaxis(pointmaps, 0, 2)
    h, w = gt.shape[:2]
    return TrackSet(gt=gt.reshape(h * w, f, 3), pred=pred.reshape(h * w, f, 3),
                    valid=valid.reshape(h * w, f))


def evaluate_reconstruction(
    samples: list[SceneSample],
    model: DenseTracker,
    depth_filter: tuple[float, float] | None = None,
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS,
    global_scale: bool = False,
    literal_scaling: bool = False,
) -> EvalSummary:
    track_sets = [reconstruction_track_set(s, predicted_pointmaps(model, s),
                                           depth_filter)
                  for s in samples]
    return evaluate_track_sets(track_sets, thresholds=thresholds,
                               global_scale=global_scale,
                               literal_scaling=literal_scaling)


def motion_error(track_sets: list[TrackSet], scale: float = 1.0) -> MotionError:
    """Error of displacements from the first frame, pooled over all entries.

    Column 0 is excluded (displacement there is zero by construction).  The
    default scale of 1 is the supervised-metric setting; pass a position
    alignment scale to mimic the monocular protocol.
    """
    if not track_sets:
        raise MetricError("no track sets to evaluate")
    errs, mags = [], []
    for ts in track_sets:
        if ts.gt.shape[1] < 2:
            raise MetricError("need at least two frames for displacements")
        gt_disp = ts.gt[:, 1:] - ts.gt[:, :1]
        pred_disp = ts.pred[:, 1:] - ts.pred[:, :1]
        errs.append(np.linalg.norm(scale * pred_disp - gt_disp, axis=-1).ravel())
        mags.append(np.linalg.norm(gt_disp, axis=-1).ravel())
    err = np.concatenate(errs)
    mag = np.concatenate(mags)
    return MotionError(epe=float(err.mean()), mean_gt_magnitude=float(mag.mean()))
