"""Peak-memory benchmark: dense model versus the query-token baseline.

Each measurement runs in a fresh interpreter so allocator state from one
configuration can never leak into another.  The worker (``python3 -m
densetrack.bench``) builds the requested tracker, runs one forward pass on a
synthetic clip, and prints a single JSON record; the parent collects the
sweep, fits the scaling shapes, and plots them.

Peak memory comes from the CUDA allocator when a GPU is present, otherwise
from the process high-water mark (ru_maxrss); the record says which.
"""

from __future__ import annotations

import argparse
import json
import resource
import subprocess
import sys
from dataclasses import asdict, dataclass

import numpy as np
import torch


class BenchError(RuntimeError):
    pass


@dataclass
class BenchRecord:
    method: str  # "dense" | "query-token"
    queries: int
    peak_bytes: int | None  # None when the run hit out-of-memory
    measure: str
    oom: bool = False


@dataclass
class BenchShape:
    """Sweep geometry: one synthetic clip, swept over query counts."""

    height: int = 240
    width: int = 240
    patch_size: int = 16
    frames: int = 10
    dim: int = 96
    depth: int = 2
    num_heads: int = 4

    def worker_args(self, method: str, queries: int) -> list[str]:
        return [
            "--method", method, "--queries", str(queries),
            "--height", str(self.height), "--width", str(self.width),
            "--patch-size", str(self.patch_size), "--frames", str(self.frames),
            "--dim", str(self.dim), "--depth", str(self.depth),
            "--num-heads", str(self.num_heads),
        ]


def _peak_memory() -> tuple[int, str]:
    if torch.cuda.is_available():
        return int(torch.cuda.max_memory_allocated()), "cuda-allocator"
    # Linux reports ru_maxrss in kilobytes
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024, "ru_maxrss"


def _query_pixels(count: int, height: int, width: int) -> torch.Tensor:
    """First ``count`` pixels in scan order as (i, j) coordinates."""
    idx = torch.arange(count)
    dtype = torch.get_default_dtype()
    return torch.stack([(idx % width).to(dtype), (idx // width).to(dtype)], dim=1)


def _run_dense(shape: BenchShape, queries: int) -> None:
    from .model import DenseTracker, ModelConfig

    cfg = ModelConfig(height=shape.height, width=shape.width,
                      patch_size=shape.patch_size, dim=shape.dim,
                      depth=shape.depth, num_heads=shape.num_heads)
    torch.manual_seed(0)
    model = DenseTracker(cfg).eval()
    images = torch.randn(shape.frames, 3, shape.height, shape.width)
    feats = torch.full((shape.frames, 3), 0.5)
    with torch.no_grad():
        out = model(images, feats, query_index=0)
        tracked = out.points_at_query().reshape(shape.frames, -1, 3)
        # the dense pass tracks every pixel; query count only selects rows
        selected = tracked[:, :queries]
        float(selected.sum())


def _run_query_token(shape: BenchShape, queries: int) -> None:
    from .baseline import QueryTokenBaseline

    torch.manual_seed(0)
    model = QueryTokenBaseline(shape.height, shape.width, shape.patch_size,
                               dim=shape.dim, num_heads=shape.num_heads).eval()
    images = torch.randn(shape.frames, 3, shape.height, shape.width)
    pix = _query_pixels(queries, shape.height, shape.width)
    with torch.no_grad():
        positions = model(images, pix)
        float(positions.sum())


def worker_main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        description="single benchmark measurement (one JSON record on stdout)")
    parser.add_argument("--method", choices=("dense", "query-token"), required=True)
    parser.add_argument("--queries", type=int, required=True)
    parser.add_argument("--height", type=int, default=240)
    parser.add_argument("--width", type=int, default=240)
    parser.add_argument("--patch-size", type=int, default=16)
    parser.add_argument("--frames", type=int, default=10)
    parser.add_argument("--dim", type=int, default=96)
    parser.add_argument("--depth", type=int, default=2)
    parser.add_argument("--num-heads", type=int, default=4)
    args = parser.parse_args(argv)
    shape = BenchShape(height=args.height, width=args.width,
                       patch_size=args.patch_size, frames=args.frames,
                       dim=args.dim, depth=args.depth, num_heads=args.num_heads)
    if torch.cuda.is_available():
        torch.cuda.reset_peak_memory_stats()
    try:
        if args.method == "dense":
            _run_dense(shape, args.queries)
        else:
            _run_query_token(shape, args.queries)
    except MemoryError:
        print(json.dumps({"method": args.method, "queries": args.queries,
                          "peak_bytes": None, "measure": "none", "oom": True}))
        return 0
    except RuntimeError as exc:
        if "memory" not in str(exc).lower() and "alloc" not in str(exc).lower():
            raise
        print(json.dumps({"method": args.method, "queries": args.queries,
                          "peak_bytes": None, "measure": "none", "oom": True}))
        return 0
    peak, measure = _peak_memory()
    print(json.dumps({"method": args.method, "queries": args.queries,
                      "peak_bytes": peak, "measure": measure, "oom": False}))
    return 0


def run_measurement(shape: BenchShape, method: str, queries: int,
                    timeout: float = 240.0) -> BenchRecord:
    """One measurement in a fresh interpreter."""
    cmd = [sys.executable, "-m", "densetrack.bench"] + shape.worker_args(method, queries)
    proc = subprocess.run(cmd, capture_output=True, text=True, timeout=timeout)
    lines = [ln for ln in proc.stdout.splitlines() if ln.strip()]
    if proc.returncode != 0 or not lines:
        raise BenchError(f"measurement {method}/{queries} failed "
                         f"(exit {proc.returncode}): {proc.stderr.strip()[-500:]}")
    rec = json.loads(lines[-1])
    return BenchRecord(**rec)


def bench_memory(shape: BenchShape, query_counts: list[int],
                 progress=None) -> list[BenchRecord]:
    """Full sweep: dense at every count, baseline until it runs out of memory."""
    records = []
    for method in ("dense", "query-token"):
        for q in query_counts:
            rec = run_measurement(shape, method, q)
            records.append(rec)
            if progress is not None:
                progress(rec)
            if rec.oom:
                break  # terminal data point for this method
    return records


def records_to_json(records: list[BenchRecord]) -> str:
    return json.dumps([asdict(r) for r in records], indent=1)


def dense_variation(records: list[BenchRecord]) -> float:
    """Relative spread (max - min) / min of dense-path peaks."""
    peaks = [r.peak_bytes for r in records if r.method == "dense" and not r.oom]
    if len(peaks) < 2:
        raise BenchError("need at least two dense measurements")
    return (max(peaks) - min(peaks)) / min(peaks)


def baseline_slope(records: list[BenchRecord]) -> float:
    """Least-squares bytes-per-query slope of the baseline curve."""
    pts = [(r.queries, r.peak_bytes) for r in records
           if r.method == "query-token" and not r.oom]
    if len(pts) < 2:
        raise BenchError("need at least two baseline measurements")
    x, y = np.array([p[0] for p in pts], dtype=np.float64), \
        np.array([p[1] for p in pts], dtype=np.float64)
    return float(np.polyfit(x, y, 1)[0])


def plot_records(records: list[BenchRecord], path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for method, style in (("dense", "o-"), ("query-token", "s--")):
        pts = sorted((r.queries, r.peak_bytes) for r in records
                     if r.method == method and not r.oom)
        if pts:
            ax.plot([p[0] for p in pts], [p[1] / 2**20 for p in pts],
                    style, label=method)
    ooms = [r.queries for r in records if r.oom]
    for q in ooms:
        ax.axvline(q, color="red", linestyle=":", alpha=0.6)
    ax.set_xlabel("query count")
    ax.set_ylabel("peak memory (MiB)")
    ax.set_title("peak memory vs queries")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


if __name__ == "__main__":
    sys.exit(worker_main())
