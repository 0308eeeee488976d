"""Tests for the two-phase training loop.

Schedule values are pinned by hand, phase definitions against the published
fine-tuning rates, and resume against an uninterrupted run, bit for bit.
"""

import math

import numpy as np
import pytest
import torch

from densetrack.model import DenseTracker, ModelConfig
from densetrack.synthdata import DatasetSpec, SceneConfig, generate_scene
from densetrack.training import (
    PHASE1_LR_INTRINSIC,
    PHASE1_LR_REST,
    PHASE2_LR_MOTION,
    PHASE2_LR_REST,
    PhaseSpec,
    TrainingDivergedError,
    apply_schedule,
    build_phase,
    load_checkpoint,
    lr_schedule,
    make_optimizer,
    parameter_groups,
    train,
)

TINY = ModelConfig(height=16, width=16, patch_size=8, dim=32, depth=1,
                   num_heads=2, taps=(0, 1), head_channels=16,
                   camera_head_depth=1)


def tiny_model(seed: int) -> DenseTracker:
    torch.manual_seed(seed)
    return DenseTracker(TINY)


@pytest.fixture(scope="module")
def datasets():
    cfgs = [SceneConfig(num_frames=4, height=16, width=16, patch_size=8,
                        num_spheres=2, num_track_vertices=8, seed=s)
            for s in (0, 1)]
    return [DatasetSpec(name="pool", scenes=[generate_scene(c) for c in cfgs])]


class TestSchedule:
    def test_hand_pinned_values(self):
        # warmup 100 of 3000 total, base 2.0
        assert lr_schedule(0, 2.0, 100, 3000) == 0.0
        assert lr_schedule(50, 2.0, 100, 3000) == 1.0  # 2.0 * 50/100
        assert lr_schedule(100, 2.0, 100, 3000) == 2.0  # cos(0) = 1
        assert lr_schedule(3000, 2.0, 100, 3000) == 0.0  # cos(pi) = -1
        # cosine midpoint 100 + 2900/2: cos(pi/2) vanishes
        assert abs(lr_schedule(1550, 2.0, 100, 3000) - 1.0) < 1e-12

    def test_no_warmup_starts_at_base(self):
        assert lr_schedule(0, 2.0, 0, 10) == 2.0

    def test_monotone_decay_after_warmup(self):
        vals = [lr_schedule(s, 1.0, 10, 200) for s in range(10, 201)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))

    def test_out_of_range_step_rejected(self):
        with pytest.raises(ValueError):
            lr_schedule(-1, 1.0, 10, 100)
        with pytest.raises(ValueError):
            lr_schedule(101, 1.0, 10, 100)


class TestPhaseDefinitions:
    def test_reconstruction_phase_rates(self):
        ph = build_phase(1)
        assert ph.group_lrs == {"intrinsic": PHASE1_LR_INTRINSIC,
                                "motion": PHASE1_LR_REST,
                                "rest": PHASE1_LR_REST}
        assert PHASE1_LR_INTRINSIC == 5e-5 and PHASE1_LR_REST == 5e-6
        assert not ph.include_motion
        assert not ph.use_query_embedding
        assert not ph.copy_motion_head_at_entry

    def test_motion_phase_rates(self):
        ph = build_phase(2)
        assert ph.group_lrs == {"intrinsic": PHASE2_LR_REST,
                                "motion": PHASE2_LR_MOTION,
                                "rest": PHASE2_LR_REST}
        assert PHASE2_LR_MOTION == 1e-5 and PHASE2_LR_REST == 1e-6
        assert ph.include_motion
        assert ph.use_query_embedding
        assert ph.copy_motion_head_at_entry

    def test_lr_scale_multiplies_every_group(self):
        ph = build_phase(1, lr_scale=40.0)
        assert ph.group_lrs["intrinsic"] == 40.0 * 5e-5
        assert ph.group_lrs["rest"] == 40.0 * 5e-6

    def test_unknown_phase_rejected(self):
        with pytest.raises(ValueError):
            build_phase(3)

    def test_bad_schedule_rejected(self):
        with pytest.raises(ValueError):
            build_phase(1, steps=10, warmup=10)
        with pytest.raises(ValueError):
            PhaseSpec(name="x", steps=5, warmup_steps=0, include_motion=False,
                      use_query_embedding=False, copy_motion_head_at_entry=False,
                      group_lrs={"intrinsic": 1.0})


class TestParameterGroups:
    def test_groups_partition_model(self):
        model = tiny_model(0)
        groups = parameter_groups(model)
        ids = [id(p) for params in groups.values() for p in params]
        assert len(ids) == len(set(ids))  # disjoint
        assert set(ids) == {id(p) for p in model.parameters()}  # exhaustive

    def test_group_membership(self):
        model = tiny_model(0)
        groups = parameter_groups(model)
        assert {id(p) for p in groups["intrinsic"]} == \
            {id(p) for p in model.intrinsic_embed.parameters()}
        motion_ids = {id(p) for p in groups["motion"]}
        assert id(model.query_embed) in motion_ids
        assert all(id(p) in motion_ids for p in model.motion_head.parameters())

    def test_schedule_applied_per_group(self):
        model = tiny_model(0)
        ph = build_phase(1, steps=100, warmup=10)
        opt = make_optimizer(model, ph)
        rates = apply_schedule(opt, ph, step=10)  # end of warmup: exactly base
        assert rates["intrinsic"] == 5e-5
        assert rates["rest"] == 5e-6
        for group in opt.param_groups:
            assert group["lr"] == ph.group_lrs[group["name"]]


class TestTrainLoop:
    def test_phase_wiring(self, datasets):
        model = tiny_model(1)
        phases = [build_phase(1, steps=2, warmup=1, lr_scale=10.0),
                  build_phase(2, steps=2, warmup=1, lr_scale=10.0)]
        hist = train(model, datasets, phases, seed=3, length_range=(2, 4))
        assert len(hist) == 4
        assert [h["phase"] for h in hist] == ["reconstruction"] * 2 + ["motion"] * 2
        assert all(h["motion"] is None for h in hist[:2])
        assert all(isinstance(h["motion"], float) for h in hist[2:])
        assert all(math.isfinite(h["total"]) for h in hist)
        # at step == warmup the scheduled rate is exactly the base rate
        assert hist[1]["lr"]["intrinsic"] == 10.0 * 5e-5
        assert hist[3]["lr"]["motion"] == 10.0 * 1e-5
        assert hist[3]["lr"]["rest"] == 10.0 * 1e-6

    def test_loss_decreases_on_repeated_scene(self, datasets):
        # big lr_scale and a short horizon: the model should at least start
        # fitting the reconstruction losses
        model = tiny_model(2)
        hist = train(model, datasets, [build_phase(1, steps=30, warmup=3, lr_scale=200.0)],
                     seed=5, length_range=(2, 4))
        first = np.mean([h["total"] for h in hist[:5]])
        last = np.mean([h["total"] for h in hist[-5:]])
        assert last < first

    def test_divergence_aborts_with_context(self, datasets):
        model = tiny_model(0)
        with torch.no_grad():
            model.patch_embed.weight.fill_(math.nan)
        with pytest.raises(TrainingDivergedError, match=r"reconstruction.*step 0"):
            train(model, datasets, [build_phase(1, steps=2, warmup=1)],
                  seed=0, length_range=(2, 4))


class TestMotionHeadCopy:
    def test_phase2_entry_copies_point_head(self, datasets):
        # zero learning rate: the only mutation left is the entry copy
        model = tiny_model(3)
        assert not torch.equal(model.motion_head.out_values.weight,
                               model.point_head.out_values.weight)
        train(model, datasets, [build_phase(2, steps=1, warmup=0, lr_scale=0.0)],
              seed=0, length_range=(2, 4))
        assert torch.equal(model.motion_head.out_values.weight,
                           model.point_head.out_values.weight)
        assert torch.equal(model.motion_head.fuse1.weight,
                           model.point_head.fuse1.weight)

    def test_phase1_never_copies(self, datasets):
        model = tiny_model(3)
        train(model, datasets, [build_phase(1, steps=1, warmup=0, lr_scale=0.0)],
              seed=0, length_range=(2, 4))
        assert not torch.equal(model.motion_head.out_values.weight,
                               model.point_head.out_values.weight)


class TestResume:
    def test_resume_is_bit_exact(self, datasets, tmp_path):
        phases = [build_phase(1, steps=3, warmup=1, lr_scale=20.0),
                  build_phase(2, steps=3, warmup=1, lr_scale=20.0)]

        model_a = tiny_model(5)
        hist_a = train(model_a, datasets, phases, seed=11, length_range=(2, 4))

        # same init, interrupted one step into phase 2 (after the head copy),
        # then resumed into a differently initialised model
        ckpt = tmp_path / "interrupt.pt"
        model_b = tiny_model(5)
        hist_b = train(model_b, datasets, phases, seed=11, length_range=(2, 4),
                       checkpoint_path=ckpt, stop_after_total_steps=4)
        assert len(hist_b) == 4
        model_c = tiny_model(99)
        hist_c = train(model_c, datasets, phases, seed=11, length_range=(2, 4),
                       resume_from=ckpt)

        assert len(hist_c) == len(hist_a) == 6
        for rec_c, rec_a in zip(hist_c, hist_a):
            assert rec_c == rec_a  # float-exact equality, including losses
        sd_a, sd_c = model_a.state_dict(), model_c.state_dict()
        assert sd_a.keys() == sd_c.keys()
        for key in sd_a:
            assert torch.equal(sd_a[key], sd_c[key]), key

    def test_checkpoint_restores_weights_exactly(self, datasets, tmp_path):
        ckpt = tmp_path / "final.pt"
        model = tiny_model(7)
        hist = train(model, datasets, [build_phase(1, steps=2, warmup=1)],
                     seed=2, length_range=(2, 4), checkpoint_path=ckpt)
        fresh = tiny_model(123)
        payload = load_checkpoint(ckpt, fresh)
        for key, val in model.state_dict().items():
            assert torch.equal(val, fresh.state_dict()[key]), key
        assert payload["history"] == hist

    def test_resume_from_finished_run_is_a_no_op(self, datasets, tmp_path):
        ckpt = tmp_path / "final.pt"
        model = tiny_model(7)
        hist = train(model, datasets, [build_phase(1, steps=2, warmup=1)],
                     seed=2, length_range=(2, 4), checkpoint_path=ckpt)
        before = {k: v.clone() for k, v in model.state_dict().items()}
        hist2 = train(model, datasets, [build_phase(1, steps=2, warmup=1)],
                      seed=2, length_range=(2, 4), resume_from=ckpt)
        assert hist2 == hist
        for key, val in model.state_dict().items():
            assert torch.equal(val, before[key]), key
