"""Two-phase training loop with deterministic, resumable state.

Phase 1 supervises cameras, depth, and pointmaps; the intrinsic conditioning
trains at a higher rate than the backbone.  Phase 2 adds the motion loss,
enables the query embedding, and starts the motion head from a copy of the
point head; only the motion head and query embedding get the higher rate.

Checkpoints capture model weights, optimizer state, and every random number
generator involved, so resuming reproduces the uninterrupted run bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .losses import LossWeights, MapLossInputs, total_loss
from .model import DenseTracker, encode_camera, intrinsic_features
from .synthdata import DatasetSpec, TrainingSequence, extract_training_sequence, sample_batch

# fine-tuning rates from the reference training recipe
PHASE1_LR_INTRINSIC = 5e-5
PHASE1_LR_REST = 5e-6
PHASE2_LR_MOTION = 1e-5
PHASE2_LR_REST = 1e-6
ADAM_BETAS = (0.9, 0.999)


class TrainingDivergedError(RuntimeError):
    """Raised when the loss stops being finite; message carries the repro state."""


@dataclass(frozen=True)
class PhaseSpec:
    """One training phase: losses, learning rates, and schedule shape."""

    name: str
    steps: int
    warmup_steps: int
    include_motion: bool
    use_query_embedding: bool
    copy_motion_head_at_entry: bool
    group_lrs: dict[str, float]  # base rates for "intrinsic" / "motion" / "rest"

    def __post_init__(self):
        if self.steps <= 0 or self.warmup_steps < 0 or self.warmup_steps >= self.steps:
            raise ValueError(f"bad schedule: warmup {self.warmup_steps} steps {self.steps}")
        if set(self.group_lrs) != {"intrinsic", "motion", "rest"}:
            raise ValueError(f"group_lrs must cover intrinsic/motion/rest, got "
                             f"{sorted(self.group_lrs)}")


def build_phase(index: int, *, steps: int = 3000, warmup: int = 100,
                lr_scale: float = 1.0) -> PhaseSpec:
    """Standard phase definitions.

    The published rates are fine-tuning rates; ``lr_scale`` scales all of
    them uniformly for from-scratch runs on small synthetic sets, where the
    originals are far too slow.
    """
    if index == 1:
        return PhaseSpec(
            name="reconstruction",
            steps=steps,
            warmup_steps=warmup,
            include_motion=False,
            use_query_embedding=False,
            copy_motion_head_at_entry=False,
            group_lrs={"intrinsic": PHASE1_LR_INTRINSIC * lr_scale,
                       "motion": PHASE1_LR_REST * lr_scale,
                       "rest": PHASE1_LR_REST * lr_scale},
        )
    if index == 2:
        return PhaseSpec(
            name="motion",
            steps=steps,
            warmup_steps=warmup,
            include_motion=True,
            use_query_embedding=True,
            copy_motion_head_at_entry=True,
            group_lrs={"intrinsic": PHASE2_LR_REST * lr_scale,
                       "motion": PHASE2_LR_MOTION * lr_scale,
                       "rest": PHASE2_LR_REST * lr_scale},
        )
    raise ValueError(f"unknown phase index {index}")


def lr_schedule(step: int, base: float, warmup: int, total: int) -> float:
    """Linear warmup to ``base`` at step == warmup, cosine to 0 at step == total."""
    if step < 0 or step > total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if warmup > 0 and step < warmup:
        return base * step / warmup
    span = total - warmup
    if span <= 0:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * (step - warmup) / span))


def parameter_groups(model: DenseTracker) -> dict[str, list[torch.nn.Parameter]]:
    """Split parameters into the three learning-rate groups."""
    intrinsic = list(model.intrinsic_embed.parameters())
    motion = (list(model.motion_head.parameters()) + [model.query_embed]
              + list(model.query_context.parameters()))
    special = {id(p) for p in intrinsic + motion}
    rest = [p for p in model.parameters() if id(p) not in special]
    return {"intrinsic": intrinsic, "motion": motion, "rest": rest}


def make_optimizer(model: DenseTracker, phase: PhaseSpec) -> torch.optim.Adam:
    groups = parameter_groups(model)
    param_groups = [
        {"params": params, "lr": 0.0, "base_lr": phase.group_lrs[name], "name": name}
        for name, params in groups.items()
    ]
    return torch.optim.Adam(param_groups, betas=ADAM_BETAS)


def apply_schedule(optimizer: torch.optim.Optimizer, phase: PhaseSpec, step: int) -> dict[str, float]:
    rates = {}
    for group in optimizer.param_groups:
        lr = lr_schedule(step, group["base_lr"], phase.warmup_steps, phase.steps)
        group["lr"] = lr
        rates[group["name"]] = lr
    return rates


@dataclass
class BatchTensors:
    """A TrainingSequence converted to model dtype."""

    images: torch.Tensor  # (F, 3, H, W)
    intrinsic_feats: torch.Tensor  # (F, 3)
    camera_gt: torch.Tensor  # (F, 9)
    depth_gt: torch.Tensor
    depth_valid: torch.Tensor
    point_gt: torch.Tensor
    point_valid: torch.Tensor
    motion_gt: torch.Tensor
    motion_valid: torch.Tensor
    query_pos: int


def sequence_tensors(seq: TrainingSequence) -> BatchTensors:
    dtype = torch.get_default_dtype()
    cam_rows = [encode_camera(pose, K)
                for pose, K in zip(seq.extrinsics, seq.intrinsics)]
    return BatchTensors(
        images=torch.from_numpy(
            np.ascontiguousarray(seq.rgb.transpose(0, 3, 1, 2))).to(dtype),
        intrinsic_feats=intrinsic_features(seq.intrinsics),
        camera_gt=torch.from_numpy(np.stack(cam_rows)).to(dtype),
        depth_gt=torch.from_numpy(seq.depths).to(dtype),
        depth_valid=torch.from_numpy(seq.depth_valid),
        point_gt=torch.from_numpy(seq.pointmaps).to(dtype),
        point_valid=torch.from_numpy(seq.point_valid),
        motion_gt=torch.from_numpy(seq.motion).to(dtype),
        motion_valid=torch.from_numpy(seq.motion_valid),
        query_pos=seq.query_pos,
    )


def train_step(model: DenseTracker, batch: BatchTensors, phase: PhaseSpec,
               weights: LossWeights):
    """One forward/backward, returning the LossReport (no optimizer update)."""
    query = batch.query_pos if phase.use_query_embedding else None
    out = model(batch.images, batch.intrinsic_feats, query_index=query)
    depth = MapLossInputs(pred=out.depth, gt=batch.depth_gt,
                          valid=batch.depth_valid, confidence=out.depth_conf)
    point = MapLossInputs(pred=out.points, gt=batch.point_gt,
                          valid=batch.point_valid, confidence=out.point_conf)
    motion = None
    if phase.include_motion:
        motion = MapLossInputs(pred=out.motion, gt=batch.motion_gt,
                               valid=batch.motion_valid, confidence=None)
    report = total_loss(out.camera, batch.camera_gt, depth, point, motion, weights)
    report.total.backward()
    return report


@dataclass
class TrainState:
    """Everything needed to continue a run exactly where it stopped."""

    phase_index: int  # position in the phases list
    step: int  # completed steps within the current phase
    history: list[dict] = field(default_factory=list)


def save_checkpoint(path: Path, model: DenseTracker,
                    optimizer: torch.optim.Optimizer | None,
                    state: TrainState, data_rng: np.random.Generator) -> None:
    payload = {
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "phase_index": state.phase_index,
        "step": state.step,
        "history": state.history,
        "data_rng": data_rng.bit_generator.state,
        "torch_rng": torch.get_rng_state(),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: Path, model: DenseTracker) -> dict:
    """Restore model weights and torch RNG; returns the raw payload."""
    payload = torch.load(Path(path), weights_only=False)
    model.load_state_dict(payload["model"])
    torch.set_rng_state(payload["torch_rng"])
    return payload


def train(
    model: DenseTracker,
    datasets: list[DatasetSpec],
    phases: list[PhaseSpec],
    seed: int,
    weights: LossWeights = LossWeights(),
    length_range: tuple[int, int] = (2, 10),
    log_every: int = 0,
    checkpoint_path: Path | None = None,
    checkpoint_every: int = 0,
    resume_from: Path | None = None,
    stop_after_total_steps: int | None = None,
    on_step=None,
) -> list[dict]:
    """Run the phase list in order; returns the per-step history.

    ``seed`` drives sequence sampling only; model init is the caller's
    responsibility.  With ``resume_from`` the run continues mid-phase and is
    bit-identical to the uninterrupted run.  ``stop_after_total_steps``
    checkpoints and returns after that many steps in this call, which is how
    an interrupted run is simulated or a long run is split across jobs.
    """
    data_rng = np.random.default_rng(seed)
    state = TrainState(phase_index=0, step=0)
    optimizer_payload = None
    if resume_from is not None:
        payload = load_checkpoint(resume_from, model)
        data_rng.bit_generator.state = payload["data_rng"]
        state = TrainState(phase_index=payload["phase_index"], step=payload["step"],
                           history=list(payload["history"]))
        optimizer_payload = payload["optimizer"]

    executed = 0
    for phase_index in range(state.phase_index, len(phases)):
        phase = phases[phase_index]
        start_step = state.step if phase_index == state.phase_index else 0
        if start_step >= phase.steps:
            continue
        if phase.copy_motion_head_at_entry and start_step == 0:
            model.copy_point_head_to_motion()
        optimizer = make_optimizer(model, phase)
        if optimizer_payload is not None and phase_index == state.phase_index:
            optimizer.load_state_dict(optimizer_payload)
            optimizer_payload = None

        for step in range(start_step, phase.steps):
            rates = apply_schedule(optimizer, phase, step)
            draw = sample_batch(datasets, data_rng, length_range)
            batch = sequence_tensors(extract_training_sequence(draw))
            optimizer.zero_grad()
            report = train_step(model, batch, phase, weights)
            if not torch.isfinite(report.total):
                raise TrainingDivergedError(
                    f"non-finite loss {report.total.item()} at phase "
                    f"{phase.name!r} step {step} (data seed {seed}); "
                    f"camera={report.camera} depth={report.depth} "
                    f"point={report.point} motion={report.motion}")
            optimizer.step()

            record = {
                "phase": phase.name,
                "step": step,
                "total": float(report.total.detach()),
                "camera": report.camera,
                "depth": report.depth,
                "point": report.point,
                "motion": report.motion,
                "depth_regression": report.depth_regression,
                "point_regression": report.point_regression,
                "lr": rates,
            }
            state.history.append(record)
            state.phase_index = phase_index
            state.step = step + 1
            if log_every and (step + 1) % log_every == 0:
                print(f"[{phase.name}] step {step + 1}/{phase.steps} "
                      f"total {record['total']:.4f} "
                      f"point_reg {record['point_regression']:.4f} "
                      f"depth_reg {record['depth_regression']:.4f}"
                      + (f" motion {record['motion']:.4f}"
                         if record["motion"] is not None else ""))
            if on_step is not None:
                on_step(record)
            if (checkpoint_path is not None and checkpoint_every
                    and (step + 1) % checkpoint_every == 0):
                save_checkpoint(checkpoint_path, model, optimizer, state, data_rng)
            executed += 1
            if stop_after_total_steps is not None and executed >= stop_after_total_steps:
                if checkpoint_path is not None:
                    save_checkpoint(checkpoint_path, model, optimizer, state, data_rng)
                return state.history

        state.step = phase.steps

    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model, None,
                        TrainState(len(phases) - 1, phases[-1].steps, state.history),
                        data_rng)
    return state.history
