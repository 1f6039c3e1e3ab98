import numpy as np
import pytest

from minidit.gemm import DEFAULT_TILE, TileConfig
from minidit.tune import autotune, default_search_space


def test_singleton_space_returns_that_candidate(system):
    only = TileConfig(kc=32, mc=32, nc=32)
    best, log = autotune([(16, 16, 16)], space=[only], repeats=1, system=system)
    assert best.to_kv() == only.to_kv()
    assert list(log) == [only.to_kv()]


def test_replay_returns_argmin(system):
    cfgs = [TileConfig(kc=32), TileConfig(kc=64), TileConfig(kc=128)]
    log = {cfgs[0].to_kv(): 3.0, cfgs[1].to_kv(): 1.0, cfgs[2].to_kv(): 2.0}
    best, _ = autotune([(8, 8, 8)], space=cfgs, timing_log=log)
    assert best.to_kv() == cfgs[1].to_kv()


def test_replay_deterministic_tiebreak(system):
    cfgs = [TileConfig(kc=32), TileConfig(kc=64)]
    log = {cfgs[0].to_kv(): 1.0, cfgs[1].to_kv(): 1.0}
    best1, _ = autotune([(8, 8, 8)], space=cfgs, timing_log=log)
    best2, _ = autotune([(8, 8, 8)], space=cfgs, timing_log=log)
    assert best1.to_kv() == best2.to_kv() == cfgs[0].to_kv()


def test_empty_space_rejected(system):
    with pytest.raises(ValueError):
        autotune([(8, 8, 8)], space=[])


def test_tuner_never_worse_than_default(system):
    # the default config is always a candidate, so by argmin the winner's
    # measured time is <= the default's measured time
    space = default_search_space()
    assert space[0].to_kv() == DEFAULT_TILE.to_kv()
    best, log = autotune([(64, 64, 64)], space=space[:4], repeats=2, system=system)
    assert log[best.to_kv()] <= log[DEFAULT_TILE.to_kv()]


def test_config_kv_roundtrip():
    cfg = TileConfig(clusters=2, kc=96, mc=32, nc=64, buffering_depth=3,
                     threads_per_cluster=2)
    text = cfg.to_kv()
    back = TileConfig.from_kv(text)
    assert back.to_kv() == text
    with pytest.raises(ValueError):
        TileConfig.from_kv("kc 96\n")
    with pytest.raises(ValueError):
        TileConfig.from_kv("bogus_key=1\n")
