import numpy as np
import pytest

from conftest import rel_err
from minidit import ops
from minidit import tensor as T
from minidit.memory import MemConfig, MemorySystem, MiB, use_system


def naive_attention(q, k, v, scale):
    s = q @ k.T * scale
    p = np.exp(s - s.max(-1, keepdims=True))
    p /= p.sum(-1, keepdims=True)
    return p @ v


def test_single_row_is_v_exactly(system, rng):
    q = T.from_numpy(rng.standard_normal((1, 8)), dtype=T.Dtype.F64)
    k = T.from_numpy(rng.standard_normal((1, 8)), dtype=T.Dtype.F64)
    v = T.from_numpy(rng.standard_normal((1, 8)), dtype=T.Dtype.F64)
    out, _ = ops.attention_fwd(q, k, v)
    assert np.array_equal(out.data, v.data)


def test_identical_keys_average_values(system, rng):
    n, dh = 12, 4
    q = rng.standard_normal((n, dh))
    k = np.tile(rng.standard_normal((1, dh)), (n, 1))
    v = rng.standard_normal((n, dh))
    out, _ = ops.attention_fwd(T.from_numpy(q, dtype=T.Dtype.F64),
                               T.from_numpy(k, dtype=T.Dtype.F64),
                               T.from_numpy(v, dtype=T.Dtype.F64), tile=5)
    assert np.abs(out.data - v.mean(axis=0)).max() < 1e-12


def test_forward_matches_naive_f64(system, rng):
    n, dh = 64, 32
    q = rng.standard_normal((n, dh))
    k = rng.standard_normal((n, dh))
    v = rng.standard_normal((n, dh))
    scale = 1.0 / np.sqrt(dh)
    out, stats = ops.attention_fwd(T.from_numpy(q, dtype=T.Dtype.F64),
                                   T.from_numpy(k, dtype=T.Dtype.F64),
                                   T.from_numpy(v, dtype=T.Dtype.F64), tile=16)
    ref = naive_attention(q, k, v, scale)
    assert rel_err(out.data, ref) < 1e-12
    lse_ref = np.log(np.exp(q @ k.T * scale).sum(-1))
    assert np.abs(stats.lse - lse_ref).max() < 1e-9


def test_forward_matches_naive_f32(system, rng):
    n, dh = 64, 32
    q32 = rng.standard_normal((n, dh)).astype(np.float32)
    k32 = rng.standard_normal((n, dh)).astype(np.float32)
    v32 = rng.standard_normal((n, dh)).astype(np.float32)
    out, _ = ops.attention_fwd(T.from_numpy(q32), T.from_numpy(k32),
                               T.from_numpy(v32), tile=16)
    ref = naive_attention(q32.astype(np.float64), k32.astype(np.float64),
                          v32.astype(np.float64), 1.0 / np.sqrt(dh))
    assert rel_err(out.data.astype(np.float64), ref) < 1e-5


def test_output_rows_are_convex_combinations(system, rng):
    n, dh = 32, 8
    v = rng.standard_normal((n, dh))
    out, _ = ops.attention_fwd(T.from_numpy(rng.standard_normal((n, dh)), dtype=T.Dtype.F64),
                               T.from_numpy(rng.standard_normal((n, dh)), dtype=T.Dtype.F64),
                               T.from_numpy(v, dtype=T.Dtype.F64), tile=8)
    eps = 1e-9
    assert np.all(out.data <= v.max(axis=0) + eps)
    assert np.all(out.data >= v.min(axis=0) - eps)


def test_tile_size_only_changes_rounding(system, rng):
    n, dh = 48, 16
    q = rng.standard_normal((n, dh))
    k = rng.standard_normal((n, dh))
    v = rng.standard_normal((n, dh))
    outs = []
    for tile in (4, 16, 48, 64):
        out, _ = ops.attention_fwd(T.from_numpy(q, dtype=T.Dtype.F64),
                                   T.from_numpy(k, dtype=T.Dtype.F64),
                                   T.from_numpy(v, dtype=T.Dtype.F64), tile=tile)
        outs.append(out.data)
    for o in outs[1:]:
        assert rel_err(o, outs[0]) < 1e-12


def test_backward_zero_upstream(system, rng):
    n, dh = 16, 8
    q = T.from_numpy(rng.standard_normal((n, dh)), dtype=T.Dtype.F64)
    k = T.from_numpy(rng.standard_normal((n, dh)), dtype=T.Dtype.F64)
    v = T.from_numpy(rng.standard_normal((n, dh)), dtype=T.Dtype.F64)
    _, stats = ops.attention_fwd(q, k, v, tile=8)
    dq, dk, dv = ops.attention_bwd(q, k, v, T.zeros((n, dh), T.Dtype.F64),
                                   stats, tile=8)
    assert np.all(dq.data == 0) and np.all(dk.data == 0) and np.all(dv.data == 0)


def test_backward_single_row(system, rng):
    q = T.from_numpy(rng.standard_normal((1, 8)), dtype=T.Dtype.F64)
    k = T.from_numpy(rng.standard_normal((1, 8)), dtype=T.Dtype.F64)
    v = T.from_numpy(rng.standard_normal((1, 8)), dtype=T.Dtype.F64)
    do = T.from_numpy(rng.standard_normal((1, 8)), dtype=T.Dtype.F64)
    _, stats = ops.attention_fwd(q, k, v)
    dq, dk, dv = ops.attention_bwd(q, k, v, do, stats)
    assert np.allclose(dv.data, do.data, atol=1e-14)
    assert np.abs(dq.data).max() < 1e-14
    assert np.abs(dk.data).max() < 1e-14


def test_backward_matches_finite_differences(system):
    n, dh = 48, 8
    scale = 1.0 / np.sqrt(dh)
    r = np.random.default_rng(9)
    q = r.standard_normal((n, dh))
    k = r.standard_normal((n, dh))
    v = r.standard_normal((n, dh))
    do = r.standard_normal((n, dh))
    qt, kt, vt = (T.from_numpy(a, dtype=T.Dtype.F64) for a in (q, k, v))
    _, stats = ops.attention_fwd(qt, kt, vt, tile=16)
    dq, dk, dv = ops.attention_bwd(qt, kt, vt, T.from_numpy(do, dtype=T.Dtype.F64),
                                   stats, tile=16)
    h = 1e-5
    for which, arr, g_an in (("q", q, dq.data), ("k", k, dk.data), ("v", v, dv.data)):
        g_num = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = arr[idx]
            arr[idx] = old + h
            fp = float(np.sum(naive_attention(q, k, v, scale) * do))
            arr[idx] = old - h
            fm = float(np.sum(naive_attention(q, k, v, scale) * do))
            arr[idx] = old
            g_num[idx] = (fp - fm) / (2 * h)
        assert rel_err(g_an, g_num) < 1e-6, which


def test_backward_never_holds_an_nxn_buffer(system, rng):
    # peak Fast growth during the call stays within the tile budget, far
    # under an N x N score matrix
    n, dh, tile = 128, 16, 16
    q = T.from_numpy(rng.standard_normal((n, dh)), dtype=T.Dtype.F64)
    k = T.from_numpy(rng.standard_normal((n, dh)), dtype=T.Dtype.F64)
    v = T.from_numpy(rng.standard_normal((n, dh)), dtype=T.Dtype.F64)
    do = T.from_numpy(rng.standard_normal((n, dh)), dtype=T.Dtype.F64)
    _, stats = ops.attention_fwd(q, k, v, tile=tile)
    base = system.fast.used_bytes
    system.fast.reset_peak()
    ops.attention_bwd(q, k, v, do, stats, tile=tile)
    peak_delta = system.fast.peak_bytes - base
    itemsize = 8
    align = system.fast.alignment_bytes
    nxn = n * n * itemsize
    # 3 tile buffers (n x tile), 2 (n x dh), 2 (tile x dh), each rounded up
    budget = 0
    for count, elems in ((3, n * tile), (2, n * dh), (2, tile * dh)):
        budget += count * ((elems * itemsize + align - 1) // align * align)
    assert peak_delta <= budget
    assert peak_delta < nxn


def test_stats_shape_mismatch_rejected(system, rng):
    q = T.from_numpy(rng.standard_normal((8, 4)), dtype=T.Dtype.F64)
    _, stats = ops.attention_fwd(q, q, q)
    q2 = T.from_numpy(rng.standard_normal((9, 4)), dtype=T.Dtype.F64)
    with pytest.raises(ValueError):
        ops.attention_bwd(q2, q2, q2, q2, stats)


# -- fused AdamW ---------------------------------------------------------------------


def test_adamw_zero_grad_no_decay_leaves_param(system, rng):
    p = rng.standard_normal(32)
    p0 = p.copy()
    st = ops.AdamWState.for_param(p, lr=1e-3, weight_decay=0.0)
    ops.adamw_fused_step(p, np.zeros(32), st)
    assert np.array_equal(p, p0)
    assert st.t == 1


def test_adamw_first_step_closed_form(system, rng):
    p = rng.standard_normal(16)
    g = rng.standard_normal(16)
    st = ops.AdamWState.for_param(p, lr=1e-3)
    ops.adamw_fused_step(p, g, st)
    assert np.allclose(st.m, (1 - st.beta1) * g, atol=1e-15)
    assert np.allclose(st.v, (1 - st.beta2) * g * g, atol=1e-15)
    assert np.all(st.v >= 0)


def test_adamw_fused_bitwise_equals_reference_10_steps(system, rng):
    p1 = rng.standard_normal(257)
    p2 = p1.copy()
    s1 = ops.AdamWState.for_param(p1, lr=3e-3, weight_decay=0.02)
    s2 = ops.AdamWState.for_param(p2, lr=3e-3, weight_decay=0.02)
    for step in range(10):
        g = np.random.default_rng(step).standard_normal(257)
        ops.adamw_fused_step(p1, g, s1)
        ops.adamw_reference_step(p2, g, s2)
        assert np.array_equal(p1, p2), f"step {step}"
        assert np.array_equal(s1.m, s2.m)
        assert np.array_equal(s1.v, s2.v)
    assert s1.t == s2.t == 10


def test_adamw_shape_mismatch(system, rng):
    p = rng.standard_normal(8)
    st = ops.AdamWState.for_param(p)
    with pytest.raises(ValueError):
        ops.adamw_fused_step(p, np.zeros(9), st)
