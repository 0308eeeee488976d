"""Command-line interface: gen-data, train, eval, bench-mem, render.

Every run owns a fresh output directory with exactly one append-only
manifest (JSON lines) recording the command, config hash, seed, code
version, outputs, wall-clock, and peak memory, so any result can be traced
back to (config, seed) and reproduced.
"""

from __future__ import annotations

import argparse
import json
import resource
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .bench import BenchShape, bench_memory, baseline_slope, dense_variation, \
    plot_records, records_to_json
from .bundles import load_scene_bundle, save_scene_bundle
from .config import ConfigError, RunConfig, config_hash, config_to_dict, load_config
from .evaluation import (
    ModelPredictor,
    OraclePredictor,
    evaluate_scenes,
    gt_trajectories,
    reconstruction_track_set,
    predicted_pointmaps,
)
from .metrics import EvalSummary, evaluate_track_sets
from .model import DenseTracker
from .render import export_scene_ply, trajectory_plot
from .synthdata import DatasetSpec, SceneSample, generate_scene
from .training import build_phase, load_checkpoint, train


class CliError(RuntimeError):
    pass


class RunManifest:
    """Exactly one per run directory; records are only ever appended."""

    def __init__(self, out_dir: Path, path: Path):
        self.out_dir = out_dir
        self.path = path
        self._t0 = time.monotonic()

    @classmethod
    def start(cls, out_dir: str | Path, command: str, cfg: RunConfig,
              seed: int | None, argv: list[str]) -> "RunManifest":
        out = Path(out_dir)
        path = out / "manifest.json"
        if path.exists():
            raise CliError(f"{path} already exists: each run needs a fresh "
                           f"output directory (manifests are append-only)")
        out.mkdir(parents=True, exist_ok=True)
        manifest = cls(out, path)
        manifest.append({
            "event": "start",
            "command": command,
            "config_hash": config_hash(cfg),
            "config": config_to_dict(cfg),
            "seed": seed,
            "version": __version__,
            "argv": argv,
        })
        return manifest

    def append(self, record: dict) -> None:
        with open(self.path, "a") as fh:
            fh.write(json.dumps(record, sort_keys=True, default=_jsonable) + "\n")

    def finish(self, outputs: list[str], **extra) -> None:
        peak_kb = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
        self.append({
            "event": "finish",
            "wall_clock_s": round(time.monotonic() - self._t0, 3),
            "peak_bytes": peak_kb * 1024,
            "memory_measure": "ru_maxrss",
            "outputs": sorted(outputs),
            **extra,
        })


def _jsonable(value):
    if isinstance(value, tuple):
        return list(value)
    if isinstance(value, (np.integer, np.floating)):
        return value.item()
    raise TypeError(f"not JSON serializable: {value!r}")


def _parse_depth_filter(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(part) for part in text.split(","))
    except ValueError as exc:
        raise CliError(f"--depth-filter wants MIN,MAX; got {text!r}") from exc
    if not 0 <= lo < hi:
        raise CliError(f"--depth-filter bounds must satisfy 0 <= min < max, "
                       f"got {lo}, {hi}")
    return lo, hi


def _apply_determinism(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


def _load_eval_scenes(cfg: RunConfig, data_dir: str | None) -> list[tuple[str, SceneSample]]:
    if data_dir is not None:
        root = Path(data_dir)
        # a bundle dir is recognized by its first frame, not its manifest,
        # so a run directory holding a run manifest can be passed directly
        bundle_dirs = sorted(p.parent for p in root.glob("**/frame_000.png"))
        if not bundle_dirs:
            raise CliError(f"no scene bundles under {root}")
        return [(d.name, load_scene_bundle(d)) for d in bundle_dirs]
    return [(f"seed_{seed:04d}", generate_scene(cfg.scene_config(seed)))
            for seed in cfg.data.eval_seeds]


def _format_table(title: str, names: list[str], summary: EvalSummary) -> str:
    lines = [title,
             f"  {'sequence':<14} {'tracks':>7} {'APD':>8} {'EPE':>9} {'scale':>8}"]
    for name, seq in zip(names, summary.per_sequence):
        lines.append(f"  {name:<14} {seq.num_tracks:>7d} {seq.apd:>8.2f} "
                     f"{seq.epe:>9.4f} {seq.scale:>8.3f}")
    lines.append(f"  {'mean':<14} {'':>7} {summary.apd:>8.2f} {summary.epe:>9.4f}")
    return "\n".join(lines)


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    manifest = RunManifest.start(args.out, "gen-data", cfg, args.seed, sys.argv[1:])
    outputs = []
    for seed in cfg.data.gen_seeds:
        sample = generate_scene(cfg.scene_config(seed))
        bundle = Path(args.out) / "scenes" / f"scene_{seed:04d}"
        save_scene_bundle(sample, bundle)
        outputs.append(str(bundle))
        print(f"wrote {bundle} ({sample.num_frames} frames, "
              f"{len(sample.vertex_tracks)} tracked vertices)")
    manifest.finish(outputs)
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.train.seed
    if args.deterministic:
        _apply_determinism(cfg.train.init_seed)
    manifest = RunManifest.start(args.out, "train", cfg, seed, sys.argv[1:])

    torch.manual_seed(cfg.train.init_seed)
    model = DenseTracker(cfg.model)
    pools = [DatasetSpec(
        name="train",
        scenes=[generate_scene(cfg.scene_config(s)) for s in cfg.data.train_seeds])]
    if cfg.data.pose_only_seeds:
        pools.append(DatasetSpec(
            name="pose-only",
            scenes=[generate_scene(cfg.scene_config(s))
                    for s in cfg.data.pose_only_seeds],
            has_tracks=False))
    phases = [build_phase(p.index, steps=p.steps, warmup=p.warmup,
                          lr_scale=p.lr_scale) for p in cfg.train.phases]
    ckpt = Path(args.out) / "checkpoint.pt"
    history = train(model, pools, phases, seed=seed,
                    length_range=cfg.train.length_range,
                    log_every=cfg.train.log_every,
                    checkpoint_path=ckpt,
                    checkpoint_every=cfg.train.checkpoint_every,
                    resume_from=args.resume)
    hist_path = Path(args.out) / "history.json"
    hist_path.write_text(json.dumps(history, default=_jsonable))
    last = history[-1]
    print(f"finished {len(history)} steps; final total loss {last['total']:.4f}")
    manifest.finish([str(ckpt), str(hist_path)],
                    final_loss=last["total"], steps=len(history))
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    mode = args.mode or cfg.eval.mode
    scale_mode = args.scale_mode or cfg.eval.scale_mode
    depth_filter = (_parse_depth_filter(args.depth_filter)
                    if args.depth_filter else cfg.eval.depth_filter)
    if args.oracle and args.checkpoint:
        raise CliError("--oracle and --checkpoint are mutually exclusive")
    if not args.oracle and not args.checkpoint:
        raise CliError("eval needs --checkpoint PATH or --oracle")
    manifest = RunManifest.start(args.out, "eval", cfg, args.seed, sys.argv[1:])

    named = _load_eval_scenes(cfg, args.data)
    names = [n for n, _ in named]
    scenes = [s for _, s in named]
    global_scale = scale_mode == "global"

    model = None
    if not args.oracle:
        torch.manual_seed(cfg.train.init_seed)
        model = DenseTracker(cfg.model)
        load_checkpoint(args.checkpoint, model)

    results = {}
    blocks = []
    if mode in ("tracking", "both"):
        predictor = OraclePredictor() if args.oracle else ModelPredictor(model)
        summary = evaluate_scenes(scenes, predictor, global_scale=global_scale,
                                  literal_scaling=cfg.eval.literal_scaling)
        results["tracking"] = asdict(summary)
        blocks.append(_format_table(
            f"tracking (scale {scale_mode})", names, summary))
    if mode in ("reconstruction", "both"):
        sets = []
        for sample in scenes:
            if args.oracle:
                pms = np.stack([pm.data for pm in sample.gt_pointmaps])
            else:
                pms = predicted_pointmaps(model, sample)
            sets.append(reconstruction_track_set(sample, pms, depth_filter))
        summary = evaluate_track_sets(sets, global_scale=global_scale,
                                      literal_scaling=cfg.eval.literal_scaling)
        results["reconstruction"] = asdict(summary)
        filt = f", depth {depth_filter[0]:g}-{depth_filter[1]:g}" \
            if depth_filter else ""
        blocks.append(_format_table(
            f"reconstruction (scale {scale_mode}{filt})", names, summary))

    report = "\n\n".join(blocks)
    print(report)
    out_json = Path(args.out) / "eval.json"
    out_json.write_text(json.dumps(results, indent=1, default=_jsonable))
    (Path(args.out) / "eval.txt").write_text(report + "\n")
    manifest.finish([str(out_json), str(Path(args.out) / "eval.txt")])
    return 0


def cmd_bench_mem(args) -> int:
    cfg = load_config(args.config)
    bench = cfg.bench
    shape = BenchShape(height=bench.height, width=bench.width,
                       patch_size=bench.patch_size, frames=bench.frames,
                       dim=bench.dim, depth=bench.depth,
                       num_heads=bench.num_heads)
    if args.query_counts:
        counts = []
        for tok in args.query_counts.split(","):
            tok = tok.strip()
            counts.append(bench.height * bench.width if tok == "all" else int(tok))
    else:
        counts = bench.resolved_counts()
    manifest = RunManifest.start(args.out, "bench-mem", cfg, args.seed, sys.argv[1:])

    def progress(rec):
        peak = "OOM" if rec.oom else f"{rec.peak_bytes / 2**20:8.1f} MiB"
        print(f"  {rec.method:<12} q={rec.queries:<7d} {peak}")

    print(f"memory sweep at {bench.height}x{bench.width}, "
          f"{bench.frames} frames, queries {counts}")
    records = bench_memory(shape, counts, progress=progress)
    series = Path(args.out) / "bench.json"
    series.write_text(records_to_json(records))
    plot = Path(args.out) / "bench.png"
    plot_records(records, plot)
    spread = dense_variation(records)
    slope = baseline_slope(records)
    print(f"dense-path spread {spread * 100:.2f}%  "
          f"baseline slope {slope:.1f} bytes/query")
    manifest.finish([str(series), str(plot)], dense_variation=spread,
                    baseline_slope=slope,
                    memory_measure=records[0].measure)
    return 0


def cmd_render(args) -> int:
    cfg = load_config(args.config)
    manifest = RunManifest.start(args.out, "render", cfg, args.seed, sys.argv[1:])
    named = _load_eval_scenes(cfg, args.data)
    name, sample = named[0]

    model = None
    if args.checkpoint:
        torch.manual_seed(cfg.train.init_seed)
        model = DenseTracker(cfg.model)
        load_checkpoint(args.checkpoint, model)

    outputs = []
    ply_dir = Path(args.out) / "ply"
    pms = predicted_pointmaps(model, sample) if model else None
    outputs += [str(p) for p in export_scene_ply(ply_dir, sample, pms)]

    if model:
        field = ModelPredictor(model).predict(sample)
        valid = gt_trajectories(sample).valid & field.valid
    else:
        field = gt_trajectories(sample)
        valid = field.valid
    traj_png = Path(args.out) / "trajectories.png"
    drawn = trajectory_plot(traj_png, sample, field.positions, valid)
    outputs.append(str(traj_png))
    print(f"rendered scene {name}: {len(sample.frames)} PLY frames, "
          f"{drawn} trajectories")
    manifest.finish(outputs)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="densetrack",
        description="joint pointmap, camera, and 3D motion prediction")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="YAML run configuration")
        p.add_argument("--out", required=True, help="fresh output directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--deterministic", action="store_true")

    p = sub.add_parser("gen-data", help="write scene bundles")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run the training phases")
    common(p)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="APD/EPE tables")
    common(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--oracle", action="store_true",
                   help="score the ground truth against itself")
    p.add_argument("--data", default=None, help="scene bundle directory")
    p.add_argument("--mode", choices=("tracking", "reconstruction", "both"),
                   default=None)
    p.add_argument("--scale-mode", choices=("per-seq", "global"), default=None)
    p.add_argument("--depth-filter", default=None, metavar="MIN,MAX")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench-mem", help="peak-memory sweep vs query count")
    common(p)
    p.add_argument("--query-counts", default=None,
                   help="comma list, e.g. 1000,10000,all")
    p.set_defaults(func=cmd_bench_mem)

    p = sub.add_parser("render", help="export PLY clouds and trajectory plots")
    common(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--data", default=None, help="scene bundle directory")
    p.set_defaults(func=cmd_render)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
