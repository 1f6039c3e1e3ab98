"""Tile-parameter sweep: measure candidates on target shapes, keep the argmin.

The tuner is deterministic given a timing table: replaying a recorded log
returns its argmin with a stable first-wins tie-break. Live mode measures the
median of R repetitions per candidate per shape and records the log so runs
are auditable.
"""

from __future__ import annotations

import json
import time
from dataclasses import replace

import numpy as np

from .gemm import DEFAULT_TILE, TileConfig, gemm
from .memory import MemorySystem, current_system


def default_search_space(base: TileConfig | None = None) -> list[TileConfig]:
    """Modest grid over cache blocks, buffering, and threads. Base comes first
    so the winner is never worse than the default."""
    base = base or DEFAULT_TILE
    space = [base]
    for kc in (128, 256, 1024):
        for mc, nc in ((32, 256), (64, 256), (64, 512), (128, 512)):
            space.append(replace(base, kc=kc, mc=mc, nc=nc))
    for depth in (1, 3):
        space.append(replace(base, buffering_depth=depth))
    for threads in (2,):
        space.append(replace(base, threads_per_cluster=threads))
    seen = set()
    out = []
    for cfg in space:
        key = cfg.to_kv()
        if key not in seen:
            seen.add(key)
            out.append(cfg)
    return out


def _measure(cfg: TileConfig, shapes: list[tuple[int, int, int]], repeats: int,
             dtype, system: MemorySystem, timer) -> float:
    rng = np.random.default_rng(0xBE)
    total = 0.0
    for (m, k, n) in shapes:
        a = rng.standard_normal((m, k)).astype(dtype)
        b = rng.standard_normal((k, n)).astype(dtype)
        c = np.empty((m, n), dtype=dtype)
        gemm(a, b, c, cfg=cfg, system=system)  # warm the pools
        times = []
        for _ in range(repeats):
            t0 = timer()
            gemm(a, b, c, cfg=cfg, system=system)
            times.append(timer() - t0)
        total += float(np.median(times))
    return total


def autotune(shapes: list[tuple[int, int, int]],
             space: list[TileConfig] | None = None,
             repeats: int = 3,
             dtype=np.float32,
             system: MemorySystem | None = None,
             timing_log: dict | None = None,
             timer=time.perf_counter) -> tuple[TileConfig, dict]:
    """Return (best config, timing log {candidate_kv: seconds}).

    With timing_log given, no measurement runs: the argmin of the recorded
    table is returned (replayable, deterministic).
    """
    if space is None:
        space = default_search_space()
    if not space:
        raise ValueError("search space is empty")
    if timing_log is not None:
        by_kv = {cfg.to_kv(): cfg for cfg in space}
        best_kv, best_t = None, None
        for kv, t in timing_log.items():
            if best_t is None or t < best_t:
                best_kv, best_t = kv, t
        if best_kv is None:
            raise ValueError("timing log is empty")
        cfg = by_kv.get(best_kv) or TileConfig.from_kv(best_kv)
        return cfg, dict(timing_log)
    ms = system or current_system()
    log: dict[str, float] = {}
    best_cfg, best_t = None, None
    for cfg in space:
        cfg.validate()
        t = _measure(cfg, shapes, repeats, dtype, ms, timer)
        log[cfg.to_kv()] = t
        if best_t is None or t < best_t:
            best_cfg, best_t = cfg, t
    return best_cfg, log


def save_timing_log(path: str, log: dict) -> None:
    with open(path, "w") as f:
        json.dump(log, f, indent=1)


def load_timing_log(path: str) -> dict:
    with open(path) as f:
        return json.load(f)
