"""Command-line driver: training runs, kernel benchmarks, the tile-parameter
sweep, and local weak/strong scaling with machine-readable reports.

Reports are JSON Lines (one record per line, a header first and a summary
last, even on error paths) and every report path also gets matplotlib PNGs
rendered next to it. Exit codes: 0 ok, 2 config error, 3 out-of-tier,
4 transport error, 5 plan mismatch.
"""

from __future__ import annotations

import argparse
import json
import os
import socket
import subprocess
import sys
import time

import numpy as np

from . import figures
from .comm import (ENV_ADDR, ENV_PORT, ENV_RANK, ENV_WORLD, communicator_from_env,
                   env_rank_config)
from .errors import CollectiveError, OutOfTierError, PlanMismatchError, TransportError
from .gemm import TileConfig, gemm
from .memory import GiB, MiB, MemConfig, MemorySystem, use_system
from .trainer import FLOPS_FORMULA, Trainer, TrainSettings
from .tune import autotune, default_search_space

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_OUT_OF_TIER = 3
EXIT_TRANSPORT = 4
EXIT_PLAN_MISMATCH = 5

MODES = ("train", "bench-gemm", "tune", "scale-weak", "scale-strong")
MODELS = ("toy", "S/2", "B/2", "L/2", "XL/2")


def parse_size(text: str) -> int:
    text = text.strip()
    mult = 1
    if text and text[-1] in "kKmMgG":
        mult = {"k": 1024, "m": MiB, "g": GiB}[text[-1].lower()]
        text = text[:-1]
    return int(float(text) * mult)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="minidit",
        description="CPU training runtime for a small diffusion transformer")
    p.add_argument("--mode", choices=MODES, default="train")
    p.add_argument("--model", choices=MODELS, default="toy")
    p.add_argument("--batch", type=int, default=8,
                   help="per-rank batch (train/weak); global batch (strong)")
    p.add_argument("--ranks", default="1",
                   help="rank count for train, or a comma list for scaling modes")
    p.add_argument("--clusters", type=int, default=1,
                   help="cluster groups per rank for tensor work")
    p.add_argument("--fast-cap", default="512M",
                   help="fast-tier capacity (suffix K/M/G); 0 = unbounded")
    p.add_argument("--automem", choices=("on", "off"), default="on")
    p.add_argument("--overlap", choices=("on", "off"), default="on",
                   help="bucketed reduce overlapped with backward vs one blocking reduce")
    p.add_argument("--throttle", choices=("off", "same_die_remote", "cross_die",
                                          "cross_cpu"), default="off")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--report", default=None, help="JSON Lines output path")
    p.add_argument("--shapes", default=None, help="shape list file, one 'M K N' per line")
    p.add_argument("--tile-config", default=None,
                   help="tile config file: consumed by train/bench, written by tune")
    return p


class Report:
    """Buffered JSON Lines writer; falls back to stdout without a path."""

    def __init__(self, path: str | None):
        self.path = path
        self.rows: list[dict] = []

    def write(self, row: dict) -> None:
        self.rows.append(row)

    def flush(self) -> None:
        text = "\n".join(json.dumps(r) for r in self.rows) + "\n"
        if self.path:
            with open(self.path, "w") as f:
                f.write(text)
        else:
            sys.stdout.write(text)


def _status_for(exc: BaseException) -> tuple[str, int]:
    if isinstance(exc, OutOfTierError):
        return "out_of_tier", EXIT_OUT_OF_TIER
    if isinstance(exc, PlanMismatchError):
        return "plan_mismatch", EXIT_PLAN_MISMATCH
    if isinstance(exc, (CollectiveError, TransportError)):
        return "transport_error", EXIT_TRANSPORT
    return "config_error", EXIT_CONFIG


def load_tile_config(args) -> TileConfig:
    if args.tile_config and args.mode != "tune" and os.path.exists(args.tile_config):
        with open(args.tile_config) as f:
            cfg = TileConfig.from_kv(f.read())
    else:
        cfg = TileConfig()
    cfg = TileConfig(**{**cfg.__dict__, "clusters": args.clusters})
    cfg.validate()
    return cfg


def settings_from_args(args) -> TrainSettings:
    cap = parse_size(args.fast_cap)
    if cap == 0:
        cap = 1024 * GiB
    s = TrainSettings(
        model=args.model, batch=args.batch, steps=args.steps, seed=args.seed,
        automem=args.automem == "on", overlap=args.overlap == "on",
        clusters=args.clusters, fast_capacity_bytes=cap, throttle=args.throttle)
    s.validate()
    return s


# -- train ----------------------------------------------------------------------


def _header_row(args, extra: dict | None = None) -> dict:
    row = {"type": "header", "mode": args.mode, "model": args.model,
           "flops_formula": FLOPS_FORMULA,
           "config": {"batch": args.batch, "ranks": args.ranks,
                      "clusters": args.clusters, "fast_cap": args.fast_cap,
                      "automem": args.automem, "overlap": args.overlap,
                      "throttle": args.throttle, "seed": args.seed,
                      "steps": args.steps}}
    if extra:
        row.update(extra)
    return row


def _run_train_single(args, report: Report, rank_env: dict | None) -> int:
    settings = settings_from_args(args)
    tile = load_tile_config(args)
    comm = communicator_from_env(rank_env) if rank_env else None
    report.write(_header_row(args, {"rank": rank_env["rank"] if rank_env else 0,
                                    "world_size": rank_env["world_size"] if rank_env else 1}))
    trainer = Trainer(settings, comm=comm, tile=tile)
    try:
        metrics = trainer.run()
        for m in metrics:
            report.write(m.to_dict())
        report.write({"type": "summary", "status": "ok",
                      "steps": len(metrics),
                      "final_loss": metrics[-1].loss if metrics else None,
                      "avg_step_s": float(np.mean([m.wall_s for m in metrics]))
                      if metrics else None,
                      "param_count": trainer.model.param_count(),
                      "note": "timings are machine-dependent"})
        return EXIT_OK
    finally:
        trainer.close()
        if comm is not None:
            comm.close()


def _spawn_ranks(args, world: int, report_base: str, extra_args: list[str],
                 batch_override: int | None = None) -> tuple[list[int], list[str]]:
    """Launch `world` child rank processes and wait for them."""
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    procs = []
    paths = []
    for r in range(world):
        path = f"{report_base}.rank{r}.jsonl"
        paths.append(path)
        cmd = [sys.executable, "-m", "minidit", "--mode", "train",
               "--model", args.model,
               "--batch", str(batch_override if batch_override is not None else args.batch),
               "--steps", str(args.steps), "--seed", str(args.seed),
               "--clusters", str(args.clusters), "--fast-cap", args.fast_cap,
               "--automem", args.automem, "--overlap", args.overlap,
               "--throttle", args.throttle, "--report", path] + extra_args
        env = dict(os.environ)
        env[ENV_RANK] = str(r)
        env[ENV_WORLD] = str(world)
        env[ENV_ADDR] = "127.0.0.1"
        env[ENV_PORT] = str(port)
        procs.append(subprocess.Popen(cmd, env=env))
    codes = [p.wait() for p in procs]
    return codes, paths


def run_train(args) -> int:
    rank_env = env_rank_config()
    report = Report(args.report)
    try:
        if rank_env is not None and rank_env["world_size"] > 1:
            code = _run_train_single(args, report, rank_env)
        else:
            world = int(args.ranks.split(",")[0])
            if world <= 1:
                code = _run_train_single(args, report, None)
            else:
                base = args.report or "minidit_train"
                codes, paths = _spawn_ranks(args, world, base, [])
                report.write(_header_row(args, {"world_size": world}))
                status = "ok" if all(c == 0 for c in codes) else "rank_failure"
                for r, path in enumerate(paths):
                    if os.path.exists(path):
                        for row in figures.read_jsonl(path):
                            if row.get("type") == "step" and r == 0:
                                report.write(row)
                report.write({"type": "summary", "status": status,
                              "rank_exit_codes": codes,
                              "note": "per-rank reports alongside this file"})
                code = max(codes) if any(codes) else EXIT_OK
    except BaseException as exc:
        status, code = _status_for(exc)
        report.write({"type": "summary", "status": status, "error": str(exc),
                      "capacity_report": getattr(exc, "report", None)})
        report.flush()
        print(f"error: {exc}", file=sys.stderr)
        return code
    report.flush()
    if args.report:
        figures.render_train_figures(args.report)
    return code


# -- gemm bench / tune -------------------------------------------------------------


def parse_shapes_file(path: str) -> list[tuple[int, int, int]]:
    shapes = []
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 'M K N', got {raw.rstrip()!r}")
            try:
                m, k, n = (int(x) for x in parts)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-integer dimension in {raw.rstrip()!r}")
            if m <= 0 or k <= 0 or n <= 0:
                raise ValueError(f"{path}:{lineno}: dimensions must be positive")
            shapes.append((m, k, n))
    if not shapes:
        raise ValueError(f"{path}: no shapes found")
    return shapes


def run_bench_gemm(args) -> int:
    report = Report(args.report)
    try:
        if not args.shapes:
            raise ValueError("--shapes is required for bench-gemm")
        shapes = parse_shapes_file(args.shapes)
        cfg = load_tile_config(args)
        report.write(_header_row(args, {"tile_config": cfg.to_kv()}))
        ms = MemorySystem(MemConfig(fast_capacity_bytes=1 * GiB,
                                    alignment_bytes=65536), trace=False)
        rng = np.random.default_rng(args.seed)
        with use_system(ms):
            for (m, k, n) in shapes:
                a = rng.standard_normal((m, k)).astype(np.float32)
                b = rng.standard_normal((k, n)).astype(np.float32)
                c = np.empty((m, n), dtype=np.float32)
                gemm(a, b, c, cfg=cfg)  # warm
                times = []
                for _ in range(3):
                    t0 = time.perf_counter()
                    gemm(a, b, c, cfg=cfg)
                    times.append(time.perf_counter() - t0)
                med = float(np.median(times))
                report.write({"type": "gemm", "shape": [m, k, n],
                              "cfg": cfg.to_kv().replace("\n", " ").strip(),
                              "median_s": med,
                              "gflops": 2.0 * m * k * n / med / 1e9})
        ms.close()
        report.write({"type": "summary", "status": "ok", "shapes": len(shapes)})
    except BaseException as exc:
        status, code = _status_for(exc)
        report.write({"type": "summary", "status": status, "error": str(exc)})
        report.flush()
        print(f"error: {exc}", file=sys.stderr)
        return code
    report.flush()
    if args.report:
        figures.render_bench_figures(args.report)
    return EXIT_OK


def run_tune(args) -> int:
    report = Report(args.report)
    try:
        if not args.tile_config:
            raise ValueError("--tile-config output path is required for tune")
        shapes = parse_shapes_file(args.shapes) if args.shapes else [(256, 256, 256)]
        base = TileConfig(clusters=args.clusters)
        space = default_search_space(base)
        ms = MemorySystem(MemConfig(fast_capacity_bytes=1 * GiB,
                                    alignment_bytes=65536), trace=False)
        with use_system(ms):
            best, log = autotune(shapes, space=space, repeats=3, system=ms)
        ms.close()
        report.write(_header_row(args, {"candidates": len(space)}))
        for kv, seconds in log.items():
            report.write({"type": "tune_candidate", "cfg": kv.replace("\n", " ").strip(),
                          "seconds": seconds})
        with open(args.tile_config, "w") as f:
            f.write(best.to_kv())
        report.write({"type": "summary", "status": "ok",
                      "best": best.to_kv().replace("\n", " ").strip(),
                      "tile_config_path": args.tile_config})
    except BaseException as exc:
        status, code = _status_for(exc)
        report.write({"type": "summary", "status": status, "error": str(exc)})
        report.flush()
        print(f"error: {exc}", file=sys.stderr)
        return code
    report.flush()
    return EXIT_OK


# -- scaling -----------------------------------------------------------------------


def run_scaling(args, weak: bool) -> int:
    report = Report(args.report)
    try:
        ranks_list = [int(x) for x in args.ranks.split(",") if x.strip()]
        if not ranks_list or any(r < 1 for r in ranks_list):
            raise ValueError(f"invalid rank list {args.ranks!r}")
        report.write(_header_row(args, {"scaling": "weak" if weak else "strong"}))
        times: dict[int, float] = {}
        rows = []
        for world in ranks_list:
            if weak:
                per_rank = args.batch
            else:
                if args.batch % world:
                    raise ValueError(
                        f"strong scaling: global batch {args.batch} not divisible by {world}")
                per_rank = args.batch // world
            base = (args.report or "minidit_scale") + f".r{world}"
            if world == 1:
                sub_args = argparse.Namespace(**vars(args))
                sub_args.batch = per_rank
                sub_args.report = base + ".rank0.jsonl"
                sub_args.mode = "train"
                sub_args.ranks = "1"
                code = run_train(sub_args)
                codes = [code]
                paths = [sub_args.report]
            else:
                codes, paths = _spawn_ranks(args, world, base, [],
                                            batch_override=per_rank)
            if any(codes):
                raise TransportError(
                    f"scaling run with {world} ranks failed; exit codes {codes} "
                    f"(per-rank reports at {base}.rank*.jsonl)")
            steps = [r for r in figures.read_jsonl(paths[0]) if r.get("type") == "step"]
            if not steps:
                raise TransportError(f"no step records from rank 0 at {paths[0]}")
            measured = steps[1:] if len(steps) > 1 else steps
            avg = float(np.mean([r["wall_s"] for r in measured]))
            times[world] = avg
            flops = float(np.mean([r["flops_est"] for r in measured]))
            rows.append({"type": "scaling", "mode": "weak" if weak else "strong",
                         "ranks": world, "per_rank_batch": per_rank,
                         "global_batch": per_rank * world, "avg_step_s": avg,
                         "flops": flops})
        r0 = ranks_list[0]
        for row in rows:
            if weak:
                row["efficiency"] = times[r0] / row["avg_step_s"]
            else:
                speedup = times[r0] / row["avg_step_s"]
                row["efficiency"] = speedup * r0 / row["ranks"]
            report.write(row)
        report.write({"type": "summary", "status": "ok",
                      "ranks": ranks_list,
                      "note": "local desk-scale measurement; large-cluster "
                              "efficiency figures are machine-specific and not "
                              "reproducible here"})
    except BaseException as exc:
        status, code = _status_for(exc)
        report.write({"type": "summary", "status": status, "error": str(exc)})
        report.flush()
        print(f"error: {exc}", file=sys.stderr)
        return code
    report.flush()
    if args.report:
        figures.render_scaling_figures(args.report)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else 0
    if args.mode == "train":
        return run_train(args)
    if args.mode == "bench-gemm":
        return run_bench_gemm(args)
    if args.mode == "tune":
        return run_tune(args)
    if args.mode == "scale-weak":
        return run_scaling(args, weak=True)
    return run_scaling(args, weak=False)


if __name__ == "__main__":
    sys.exit(main())
