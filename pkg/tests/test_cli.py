import json
import os
import subprocess
import sys

import numpy as np
import pytest

from minidit.cli import (EXIT_CONFIG, EXIT_OK, EXIT_OUT_OF_TIER, main,
                         parse_shapes_file, parse_size)
from minidit.figures import read_jsonl


def run_cli(args):
    return main(args)


def test_parse_size():
    assert parse_size("512M") == 512 * 1024 * 1024
    assert parse_size("4k") == 4096
    assert parse_size("2G") == 2 * 1024 ** 3
    assert parse_size("12345") == 12345


def test_train_writes_parseable_report_and_figures(tmp_path):
    report = tmp_path / "train.jsonl"
    code = run_cli(["--mode", "train", "--steps", "2", "--batch", "2",
                    "--seed", "3", "--report", str(report)])
    assert code == EXIT_OK
    rows = read_jsonl(str(report))
    assert rows[0]["type"] == "header"
    assert "flops_formula" in rows[0]
    steps = [r for r in rows if r["type"] == "step"]
    assert len(steps) == 2
    assert rows[-1]["type"] == "summary" and rows[-1]["status"] == "ok"
    assert (tmp_path / "train.loss.png").exists()
    assert (tmp_path / "train.step_time.png").exists()


def test_train_deterministic_loss_across_invocations(tmp_path):
    cols = []
    for i in range(2):
        report = tmp_path / f"t{i}.jsonl"
        assert run_cli(["--mode", "train", "--steps", "3", "--batch", "2",
                        "--seed", "9", "--report", str(report)]) == EXIT_OK
        cols.append([r["loss"] for r in read_jsonl(str(report))
                     if r["type"] == "step"])
    assert cols[0] == cols[1]


def test_out_of_tier_exit_code_and_summary(tmp_path):
    report = tmp_path / "oot.jsonl"
    code = run_cli(["--mode", "train", "--steps", "1", "--batch", "2",
                    "--automem", "off", "--fast-cap", "2M",
                    "--report", str(report)])
    assert code == EXIT_OUT_OF_TIER
    rows = read_jsonl(str(report))
    assert rows[-1]["type"] == "summary"
    assert rows[-1]["status"] == "out_of_tier"
    assert rows[-1]["capacity_report"] is not None


def test_automem_matches_uncapped_baseline_bitwise(tmp_path):
    rep_off = tmp_path / "off.jsonl"
    assert run_cli(["--mode", "train", "--steps", "2", "--batch", "2",
                    "--seed", "4", "--automem", "off", "--fast-cap", "0",
                    "--report", str(rep_off)]) == EXIT_OK
    rep_on = tmp_path / "on.jsonl"
    assert run_cli(["--mode", "train", "--steps", "2", "--batch", "2",
                    "--seed", "4", "--automem", "on", "--fast-cap", "32M",
                    "--report", str(rep_on)]) == EXIT_OK
    off = [r["loss"] for r in read_jsonl(str(rep_off)) if r["type"] == "step"]
    on = [r["loss"] for r in read_jsonl(str(rep_on)) if r["type"] == "step"]
    assert off == on


def test_bench_gemm_five_shape_rows(tmp_path):
    shapes = tmp_path / "shapes.txt"
    shapes.write_text("8 1152 3456\n8 1152 1152\n8 1152 4608\n"
                      "8 4608 1152\n8 1152 6912\n")
    report = tmp_path / "bench.jsonl"
    code = run_cli(["--mode", "bench-gemm", "--shapes", str(shapes),
                    "--report", str(report)])
    assert code == EXIT_OK
    rows = [r for r in read_jsonl(str(report)) if r["type"] == "gemm"]
    assert len(rows) == 5
    for r in rows:
        assert r["median_s"] > 0 and r["gflops"] > 0 and "cfg" in r
    assert (tmp_path / "bench.gflops.png").exists()


def test_malformed_shape_line_reports_line_number(tmp_path, capsys):
    shapes = tmp_path / "bad.txt"
    shapes.write_text("8 8 8\n7 seven 7\n")
    report = tmp_path / "r.jsonl"
    code = run_cli(["--mode", "bench-gemm", "--shapes", str(shapes),
                    "--report", str(report)])
    assert code == EXIT_CONFIG
    err = capsys.readouterr().err
    assert ":2:" in err
    rows = read_jsonl(str(report))
    assert rows[-1]["status"] == "config_error"


def test_shapes_parser_errors(tmp_path):
    f = tmp_path / "s.txt"
    f.write_text("1 2\n")
    with pytest.raises(ValueError, match=":1:"):
        parse_shapes_file(str(f))
    f.write_text("0 2 2\n")
    with pytest.raises(ValueError):
        parse_shapes_file(str(f))
    f.write_text("# only a comment\n")
    with pytest.raises(ValueError):
        parse_shapes_file(str(f))


def test_tune_singleton_space_and_reload(tmp_path):
    # tune writes a config file that later runs consume without changing values
    cfg_path = tmp_path / "tile.cfg"
    report = tmp_path / "tune.jsonl"
    shapes = tmp_path / "s.txt"
    shapes.write_text("16 16 16\n")
    code = run_cli(["--mode", "tune", "--shapes", str(shapes),
                    "--tile-config", str(cfg_path), "--report", str(report)])
    assert code == EXIT_OK
    assert cfg_path.exists()
    rows = read_jsonl(str(report))
    assert rows[-1]["status"] == "ok"

    rep1 = tmp_path / "a.jsonl"
    rep2 = tmp_path / "b.jsonl"
    assert run_cli(["--mode", "train", "--steps", "2", "--batch", "2",
                    "--seed", "6", "--report", str(rep1)]) == EXIT_OK
    assert run_cli(["--mode", "train", "--steps", "2", "--batch", "2",
                    "--seed", "6", "--tile-config", str(cfg_path),
                    "--report", str(rep2)]) == EXIT_OK
    l1 = [r["loss"] for r in read_jsonl(str(rep1)) if r["type"] == "step"]
    l2 = [r["loss"] for r in read_jsonl(str(rep2)) if r["type"] == "step"]
    assert l1 == l2  # tiling choices never change numerics


def test_tune_requires_output_path(tmp_path):
    assert run_cli(["--mode", "tune"]) == EXIT_CONFIG


def test_invalid_flag_exits_config():
    assert main(["--mode", "warp-speed"]) == EXIT_CONFIG


@pytest.mark.slow
def test_multirank_train_subprocess(tmp_path):
    report = tmp_path / "dp.jsonl"
    code = run_cli(["--mode", "train", "--ranks", "2", "--steps", "2",
                    "--batch", "2", "--automem", "off", "--fast-cap", "0",
                    "--report", str(report)])
    assert code == EXIT_OK
    rows = read_jsonl(str(report))
    assert rows[-1]["status"] == "ok"
    assert rows[-1]["rank_exit_codes"] == [0, 0]
    assert (tmp_path / "dp.jsonl.rank0.jsonl").exists()
    assert (tmp_path / "dp.jsonl.rank1.jsonl").exists()


@pytest.mark.slow
def test_weak_scaling_emits_efficiency_table(tmp_path):
    report = tmp_path / "weak.jsonl"
    code = run_cli(["--mode", "scale-weak", "--ranks", "1,2", "--steps", "2",
                    "--batch", "2", "--automem", "off", "--fast-cap", "0",
                    "--report", str(report)])
    assert code == EXIT_OK
    rows = read_jsonl(str(report))
    scaling = [r for r in rows if r["type"] == "scaling"]
    assert [r["ranks"] for r in scaling] == [1, 2]
    assert scaling[0]["efficiency"] == 1.0
    # weak scaling doubles the global batch when ranks double
    assert scaling[1]["global_batch"] == 2 * scaling[0]["global_batch"]
    for r in scaling:
        assert {"avg_step_s", "flops", "efficiency"} <= set(r)
    assert rows[-1]["status"] == "ok"
    assert (tmp_path / "weak.scaling.png").exists()


@pytest.mark.slow
def test_strong_scaling_divides_batch(tmp_path):
    report = tmp_path / "strong.jsonl"
    code = run_cli(["--mode", "scale-strong", "--ranks", "1,2", "--steps", "2",
                    "--batch", "4", "--automem", "off", "--fast-cap", "0",
                    "--report", str(report)])
    assert code == EXIT_OK
    rows = [r for r in read_jsonl(str(report)) if r["type"] == "scaling"]
    assert rows[0]["per_rank_batch"] == 4 and rows[0]["global_batch"] == 4
    assert rows[1]["per_rank_batch"] == 2 and rows[1]["global_batch"] == 4
    code2 = run_cli(["--mode", "scale-strong", "--ranks", "1,3", "--steps", "1",
                     "--batch", "4", "--report", str(report)])
    assert code2 == EXIT_CONFIG  # 4 not divisible by 3
