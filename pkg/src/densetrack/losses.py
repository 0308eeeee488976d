"""Training losses for camera, depth, pointmap, and motion predictions.

Map losses follow a shared pattern: a confidence-weighted regression term
sigma * ||res|| - alpha * log(sigma) plus a forward-difference gradient
term.  Confidences must satisfy sigma > 1, so the log term is a reward for
admitting uncertainty; with sigma identically 1 the weighted term reduces
exactly to the plain masked regression.  Motion is supervised by plain
regression only.  Camera parameters use an elementwise Huber loss.

All reductions are means over contributing elements so the weights in
LossWeights are comparable across image sizes.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass(frozen=True)
class LossWeights:
    """Term weights and shape constants for the total training loss."""

    camera: float = 5.0
    depth: float = 1.0
    point: float = 1.0
    motion: float = 1.0
    alpha: float = 0.2  # confidence log-reward strength
    huber_delta: float = 0.1


@dataclass
class MapLossInputs:
    """One dense prediction/target pair.

    ``pred``/``gt`` are (..., H, W, C) for vector maps or (..., H, W) for
    scalar maps; ``valid`` is a (..., H, W) bool mask.  ``confidence`` is
    sigma > 1, same shape as ``valid``; None means no confidence weighting.
    """

    pred: torch.Tensor
    gt: torch.Tensor
    valid: torch.Tensor
    confidence: torch.Tensor | None = None


def _residual_norm(pred: torch.Tensor, gt: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    """Per-pixel residual magnitude: L2 over channels, |.| for scalar maps."""
    if pred.shape != gt.shape:
        raise ValueError(f"pred/gt shapes differ: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    if pred.shape == valid.shape:
        return (pred - gt).abs()
    if pred.shape[:-1] != valid.shape:
        raise ValueError(f"mask shape {tuple(valid.shape)} does not match map "
                         f"{tuple(pred.shape)}")
    return torch.linalg.vector_norm(pred - gt, dim=-1)


def map_regression_loss(pred: torch.Tensor, gt: torch.Tensor,
                        valid: torch.Tensor) -> torch.Tensor:
    """Mean residual magnitude over valid pixels; zero if none are valid."""
    res = _residual_norm(pred, gt, valid)
    mask = valid.bool()
    if not mask.any():
        return pred.sum() * 0.0
    return res[mask].mean()


def confidence_loss(pred: torch.Tensor, gt: torch.Tensor, valid: torch.Tensor,
                    confidence: torch.Tensor, alpha: float) -> torch.Tensor:
    """Mean of sigma * ||res|| - alpha * log(sigma) over valid pixels.

    Since sigma > 1, log(sigma) > 0: confident (small sigma) pixels pay less
    for their residual but forgo the reward.  sigma == 1 everywhere recovers
    map_regression_loss exactly.
    """
    res = _residual_norm(pred, gt, valid)
    mask = valid.bool()
    if not mask.any():
        return pred.sum() * 0.0
    sigma = confidence[mask]
    return (sigma * res[mask] - alpha * torch.log(sigma)).mean()


def gradient_loss(pred: torch.Tensor, gt: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    """Forward-difference smoothness matching term.

    A pixel contributes ||d_i pred - d_i gt|| + ||d_j pred - d_j gt|| with
    forward differences along columns (i) and rows (j); it is excluded when
    either forward neighbor is invalid or out of bounds, so the last row and
    column never contribute.
    """
    vector = pred.shape != valid.shape
    mask = valid.bool()
    # contributor needs itself plus both forward neighbors valid
    include = mask[..., :-1, :-1] & mask[..., :-1, 1:] & mask[..., 1:, :-1]
    if not include.any():
        return pred.sum() * 0.0

    def fwd_diff(m):
        di = m[..., :-1, 1:, :] - m[..., :-1, :-1, :] if vector else \
            m[..., :-1, 1:] - m[..., :-1, :-1]
        dj = m[..., 1:, :-1, :] - m[..., :-1, :-1, :] if vector else \
            m[..., 1:, :-1] - m[..., :-1, :-1]
        return di, dj

    pi, pj = fwd_diff(pred)
    gi, gj = fwd_diff(gt)
    if vector:
        term = (torch.linalg.vector_norm(pi - gi, dim=-1)
                + torch.linalg.vector_norm(pj - gj, dim=-1))
    else:
        term = (pi - gi).abs() + (pj - gj).abs()
    return term[include].mean()


def camera_loss(pred: torch.Tensor, gt: torch.Tensor, delta: float = 0.1) -> torch.Tensor:
    """Mean elementwise Huber loss on the 9-number camera encodings.

    r^2 / 2 for |r| <= delta, delta * (|r| - delta / 2) beyond.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"camera shapes differ: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    r = (pred - gt).abs()
    quad = 0.5 * r * r
    lin = delta * (r - 0.5 * delta)
    return torch.where(r <= delta, quad, lin).mean()


def motion_loss(pred: torch.Tensor, gt: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    """Masked regression on 3D motion; no confidence or gradient terms."""
    return map_regression_loss(pred, gt, valid)


def map_loss(inputs: MapLossInputs, alpha: float) -> torch.Tensor:
    """Confidence-weighted regression plus gradient term for one map."""
    if inputs.confidence is not None:
        reg = confidence_loss(inputs.pred, inputs.gt, inputs.valid,
                              inputs.confidence, alpha)
    else:
        reg = map_regression_loss(inputs.pred, inputs.gt, inputs.valid)
    return reg + gradient_loss(inputs.pred, inputs.gt, inputs.valid)


@dataclass
class LossReport:
    """Weighted total plus detached per-term values for logging."""

    total: torch.Tensor
    camera: float
    depth: float
    point: float
    motion: float | None
    depth_regression: float  # plain masked regression, for convergence checks
    point_regression: float


def total_loss(
    camera_pred: torch.Tensor,
    camera_gt: torch.Tensor,
    depth: MapLossInputs,
    point: MapLossInputs,
    motion: MapLossInputs | None = None,
    weights: LossWeights = LossWeights(),
) -> LossReport:
    """Weighted sum of camera, depth, point, and (optionally) motion losses."""
    cam = camera_loss(camera_pred, camera_gt, weights.huber_delta)
    depth_term = map_loss(depth, weights.alpha)
    point_term = map_loss(point, weights.alpha)
    total = (weights.camera * cam + weights.depth * depth_term
             + weights.point * point_term)
    motion_val = None
    if motion is not None:
        motion_term = motion_loss(motion.pred, motion.gt, motion.valid)
        total = total + weights.motion * motion_term
        motion_val = float(motion_term.detach())
    return LossReport(
        total=total,
        camera=float(cam.detach()),
        depth=float(depth_term.detach()),
        point=float(point_term.detach()),
        motion=motion_val,
        depth_regression=float(map_regression_loss(
            depth.pred.detach(), depth.gt, depth.valid)),
        point_regression=float(map_regression_loss(
            point.pred.detach(), point.gt, point.valid)),
    )
