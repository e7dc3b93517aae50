"""Wall-time and memory measurements of the two splatting paths."""

from __future__ import annotations

import csv
import time
import tracemalloc

import numpy as np

from .geom import GridSpec
from .splat import splat_basic, splat_fast

BENCH_COLUMNS = ("path", "N", "V", "wall_time_s", "peak_mem_bytes")
BENCH_SIGMA_CELLS = 1.5


def parse_cases(text: str) -> list[tuple[str, int, int]]:
    """``"basic:2000:32,fast:16000:64"`` -> ``[("basic", 2000, 32), ("fast", 16000, 64)]``."""
    cases = []
    for item in text.split(","):
        parts = item.strip().split(":")
        if len(parts) != 3 or parts[0] not in ("basic", "fast"):
            raise ValueError(f"bad bench case {item!r}; expected path:N:D")
        n, d = int(parts[1]), int(parts[2])
        if n < 1 or d < 1:
            raise ValueError(f"bad bench case {item!r}; N and D must be positive")
        cases.append((parts[0], n, d))
    return cases


def _inputs(n: int, d: int, rng: np.random.Generator):
    u = rng.uniform(0.1 * d, 0.9 * d, (n, 3))
    scales = rng.uniform(0.1, 0.5, n)
    return u, scales


def time_splat(path: str, n: int, d: int, repeats: int = 3, seed: int = 0) -> float:
    """Best-of-``repeats`` wall time of one splat of ``n`` random points on a ``d³`` grid."""
    rng = np.random.default_rng(seed)
    u, scales = _inputs(n, d, rng)
    grid = GridSpec.cube(d)
    sizes = np.full((n, 3), BENCH_SIGMA_CELLS)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        if path == "basic":
            splat_basic(u, sizes, scales, grid)
        else:
            splat_fast(u, scales, BENCH_SIGMA_CELLS, grid)
        best = min(best, time.perf_counter() - t0)
    return best


def peak_memory(path: str, n: int, d: int, seed: int = 0) -> int:
    """Peak traced allocation in bytes during one splat (an estimate: numpy buffers only)."""
    rng = np.random.default_rng(seed)
    u, scales = _inputs(n, d, rng)
    grid = GridSpec.cube(d)
    tracemalloc.start()
    try:
        if path == "basic":
            splat_basic(u, np.full((n, 3), BENCH_SIGMA_CELLS), scales, grid)
        else:
            splat_fast(u, scales, BENCH_SIGMA_CELLS, grid)
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    return int(peak)


def run_bench(cases, repeats: int = 3, seed: int = 0) -> list[dict]:
    rows = []
    for path, n, d in cases:
        rows.append({
            "path": path, "N": n, "V": d**3,
            "wall_time_s": time_splat(path, n, d, repeats, seed),
            "peak_mem_bytes": peak_memory(path, n, d, seed),
        })
    return rows


def write_bench_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS, lineterminator="\n")
        out.writeheader()
        out.writerows(rows)


def fit_slope(ns, times) -> float:
    """Least-squares slope of time against point count."""
    return float(np.polyfit(np.asarray(ns, dtype=np.float64), np.asarray(times, dtype=np.float64), 1)[0])
