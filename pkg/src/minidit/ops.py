"""Transformer operator set: forward and explicit backward kernels.

Everything here is deterministic numpy; matrix contractions inside attention
use the same ascending-k ordered accumulation as the blocked GEMM, so results
do not depend on batching or tiling choices. Backward formulas are analytic
and validated against central finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .memory import MemorySystem, MemTier, current_system

_SQRT_2_OVER_PI = 0.7978845608028654
_GELU_C = 0.044715


# -- elementwise activations ----------------------------------------------------


def _gelu_fwd(x: np.ndarray) -> np.ndarray:
    u = _SQRT_2_OVER_PI * (x + _GELU_C * x * x * x)
    return 0.5 * x * (1.0 + np.tanh(u))


def _gelu_bwd(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    u = _SQRT_2_OVER_PI * (x + _GELU_C * x * x * x)
    t = np.tanh(u)
    sech2 = 1.0 - t * t
    du = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_C * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * sech2 * du)


def _silu_fwd(x: np.ndarray) -> np.ndarray:
    s = 1.0 / (1.0 + np.exp(-x))
    return x * s


def _silu_bwd(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    s = 1.0 / (1.0 + np.exp(-x))
    return dy * (s * (1.0 + x * (1.0 - s)))


def _wrap_unary(fn, x: T.Tensor) -> T.Tensor:
    x.check_readable()
    out = T.empty(x.shape, x.dtype, tier=x.tier)
    np.copyto(out.data, fn(x.data))
    return out


def gelu_fwd(x: T.Tensor) -> T.Tensor:
    """Tanh-approximated GELU: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))."""
    return _wrap_unary(_gelu_fwd, x)


def gelu_bwd(x: T.Tensor, dy: T.Tensor) -> T.Tensor:
    out = T.empty(x.shape, x.dtype, tier=x.tier)
    np.copyto(out.data, _gelu_bwd(x.data, dy.data))
    return out


def silu_fwd(x: T.Tensor) -> T.Tensor:
    return _wrap_unary(_silu_fwd, x)


def silu_bwd(x: T.Tensor, dy: T.Tensor) -> T.Tensor:
    out = T.empty(x.shape, x.dtype, tier=x.tier)
    np.copyto(out.data, _silu_bwd(x.data, dy.data))
    return out


# -- softmax ---------------------------------------------------------------------


def _softmax_fwd(x: np.ndarray) -> np.ndarray:
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=-1, keepdims=True)


def _softmax_bwd(y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    dot = np.sum(dy * y, axis=-1, keepdims=True)
    return y * (dy - dot)


def softmax_fwd(x: T.Tensor) -> T.Tensor:
    """Row softmax with max subtraction; rows sum to 1 within dtype tolerance."""
    return _wrap_unary(_softmax_fwd, x)


def softmax_bwd(y: T.Tensor, dy: T.Tensor) -> T.Tensor:
    out = T.empty(y.shape, y.dtype, tier=y.tier)
    np.copyto(out.data, _softmax_bwd(y.data, dy.data))
    return out


# -- layer normalization ----------------------------------------------------------


def _layernorm_fwd(h: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                   eps: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    mu = np.mean(h, axis=-1, keepdims=True)
    xc = h - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xn = xc * rstd
    y = gamma * xn + beta
    return y, mu[..., 0], rstd[..., 0]


def _layernorm_bwd(h: np.ndarray, gamma: np.ndarray, mean: np.ndarray,
                   rstd: np.ndarray, dy: np.ndarray
                   ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    mu = mean[..., None]
    rs = rstd[..., None]
    xn = (h - mu) * rs
    lead = tuple(range(h.ndim - 1))
    dgamma = np.sum(dy * xn, axis=lead)
    dbeta = np.sum(dy, axis=lead)
    dxn = dy * gamma
    dh = rs * (dxn - np.mean(dxn, axis=-1, keepdims=True)
               - xn * np.mean(dxn * xn, axis=-1, keepdims=True))
    return dh, dgamma, dbeta


def layernorm_fwd(h: T.Tensor, gamma: T.Tensor, beta: T.Tensor,
                  eps: float = 1e-6) -> tuple[T.Tensor, np.ndarray, np.ndarray]:
    """Per-row normalization; returns (y, mean, rstd) for reuse in backward."""
    h.check_readable()
    y = T.empty(h.shape, h.dtype, tier=h.tier)
    out, mean, rstd = _layernorm_fwd(h.data, gamma.data, beta.data, eps)
    np.copyto(y.data, out)
    return y, mean, rstd


def layernorm_bwd(h: T.Tensor, gamma: T.Tensor, mean: np.ndarray, rstd: np.ndarray,
                  dy: T.Tensor) -> tuple[T.Tensor, T.Tensor, T.Tensor]:
    dh_np, dg_np, db_np = _layernorm_bwd(h.data, gamma.data, mean, rstd, dy.data)
    dh = T.from_numpy(dh_np, dtype=h.dtype, tier=h.tier)
    dg = T.from_numpy(dg_np, dtype=h.dtype, tier=h.tier)
    db = T.from_numpy(db_np, dtype=h.dtype, tier=h.tier)
    return dh, dg, db


# -- conditioned modulation ---------------------------------------------------------


def adaln_modulate(h: T.Tensor, gamma_t: T.Tensor, beta_t: T.Tensor,
                   eps: float = 1e-6) -> tuple[T.Tensor, dict]:
    """y = gamma_t * LayerNorm(h) + beta_t, with unit affine inside the norm."""
    if gamma_t.shape != (h.shape[-1],) or beta_t.shape != (h.shape[-1],):
        raise ValueError("modulation vectors must have length D")
    ones = np.ones(h.shape[-1], dtype=h.dtype.np)
    zero = np.zeros(h.shape[-1], dtype=h.dtype.np)
    xn, mean, rstd = _layernorm_fwd(h.data, ones, zero, eps)
    y = T.from_numpy(gamma_t.data * xn + beta_t.data, dtype=h.dtype, tier=h.tier)
    ctx = {"h": h, "gamma_t": gamma_t, "mean": mean, "rstd": rstd, "xn": xn, "eps": eps}
    return y, ctx


def adaln_modulate_bwd(ctx: dict, dy: T.Tensor) -> tuple[T.Tensor, T.Tensor, T.Tensor]:
    h = ctx["h"]
    xn = ctx["xn"]
    lead = tuple(range(h.data.ndim - 1))
    dgamma = np.sum(dy.data * xn, axis=lead)
    dbeta = np.sum(dy.data, axis=lead)
    ones = np.ones(h.shape[-1], dtype=h.dtype.np)
    dxn = dy.data * ctx["gamma_t"].data
    dh_np, _, _ = _layernorm_bwd(h.data, ones, ctx["mean"], ctx["rstd"], dxn)
    return (T.from_numpy(dh_np, dtype=h.dtype, tier=h.tier),
            T.from_numpy(dgamma, dtype=h.dtype, tier=h.tier),
            T.from_numpy(dbeta, dtype=h.dtype, tier=h.tier))


# -- streaming attention -----------------------------------------------------------


@dataclass
class AttentionStats:
    """Per-query-row softmax statistics saved for the recomputing backward."""

    row_max: np.ndarray  # (..., N)
    log_denom: np.ndarray  # (..., N)

    @property
    def lse(self) -> np.ndarray:
        return self.row_max + self.log_denom


class _FastScratch:
    """Fast-tier scratch allocations, freed together; keeps tile buffers visible
    to the arena's peak accounting."""

    def __init__(self, system: MemorySystem):
        self.system = system
        self._allocs = []

    def array(self, shape, dtype) -> np.ndarray:
        dtype = np.dtype(dtype)
        count = 1
        for s in shape:
            count *= int(s)
        alloc = self.system.alloc(max(count, 1) * dtype.itemsize,
                                  tier=MemTier.FAST, label="attn_ws")
        self._allocs.append(alloc)
        return alloc.buf.view(dtype).reshape(shape)

    def close(self) -> None:
        for a in self._allocs:
            a.arena.free_if_live(a)
        self._allocs.clear()


def _bmm_step(out: np.ndarray, a: np.ndarray, b: np.ndarray, tmp: np.ndarray) -> None:
    """out += a @ b for stacked 2-D operands, ascending-k ordered accumulation."""
    kdim = a.shape[-1]
    for k in range(kdim):
        np.multiply(a[..., :, k, None], b[..., k, None, :], out=tmp)
        np.add(out, tmp, out=out)


DEFAULT_ATTN_TILE = 64


def _attention_fwd(q: np.ndarray, k: np.ndarray, v: np.ndarray, scale: float,
                   tile: int, system: MemorySystem
                   ) -> tuple[np.ndarray, AttentionStats]:
    # q, k, v: (..., N, Dh); streaming over key tiles with running max/denominator.
    lead = q.shape[:-2]
    n, dh = q.shape[-2], q.shape[-1]
    nk = k.shape[-2]
    dt = q.dtype
    ws = _FastScratch(system)
    try:
        out = np.zeros(lead + (n, dh), dtype=dt)
        m = np.full(lead + (n,), -np.inf, dtype=dt)
        denom = np.zeros(lead + (n,), dtype=dt)
        s_tile = ws.array(lead + (n, tile), dt)
        tmp_nt = ws.array(lead + (n, tile), dt)
        pv = ws.array(lead + (n, dh), dt)
        tmp_nd = ws.array(lead + (n, dh), dt)
        for j0 in range(0, nk, tile):
            j1 = min(j0 + tile, nk)
            tw = j1 - j0
            s = s_tile[..., :tw]
            s.fill(0)
            _bmm_step(s, q, np.swapaxes(k[..., j0:j1, :], -1, -2), tmp_nt[..., :tw])
            np.multiply(s, dt.type(scale), out=s)
            tile_max = np.max(s, axis=-1)
            m_new = np.maximum(m, tile_max)
            corr = np.exp(m - m_new)  # exp(-inf - finite) = 0 covers the first tile
            np.subtract(s, m_new[..., None], out=s)
            np.exp(s, out=s)
            denom = denom * corr + np.sum(s, axis=-1)
            pv.fill(0)
            _bmm_step(pv, s, v[..., j0:j1, :], tmp_nd)
            out = out * corr[..., None] + pv
            m = m_new
        out = out / denom[..., None]
        stats = AttentionStats(row_max=m.copy(), log_denom=np.log(denom))
        return out, stats
    finally:
        ws.close()


def _attention_bwd(q: np.ndarray, k: np.ndarray, v: np.ndarray, do: np.ndarray,
                   stats: AttentionStats, scale: float, tile: int,
                   system: MemorySystem
                   ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # Probabilities are recomputed tile by tile from the saved row stats; no
    # (N x N) buffer is ever resident.
    lead = q.shape[:-2]
    n, dh = q.shape[-2], q.shape[-1]
    nk = k.shape[-2]
    dt = q.dtype
    lse = stats.lse[..., None]
    ws = _FastScratch(system)
    try:
        dq = np.zeros_like(q)
        dk = np.zeros_like(k)
        dv = np.zeros_like(v)
        o_rec = np.zeros(lead + (n, dh), dtype=dt)
        p_tile = ws.array(lead + (n, tile), dt)
        tmp_nt = ws.array(lead + (n, tile), dt)
        tmp_nt2 = ws.array(lead + (n, tile), dt)
        tmp_nd = ws.array(lead + (n, dh), dt)
        tmp_nd2 = ws.array(lead + (n, dh), dt)
        t_td = ws.array(lead + (tile, dh), dt)
        tmp_td = ws.array(lead + (tile, dh), dt)

        def probs(j0: int, j1: int) -> np.ndarray:
            tw = j1 - j0
            p = p_tile[..., :tw]
            p.fill(0)
            _bmm_step(p, q, np.swapaxes(k[..., j0:j1, :], -1, -2), tmp_nt[..., :tw])
            np.multiply(p, dt.type(scale), out=p)
            np.subtract(p, lse, out=p)
            np.exp(p, out=p)
            return p

        for j0 in range(0, nk, tile):
            j1 = min(j0 + tile, nk)
            p = probs(j0, j1)
            tmp_nd.fill(0)
            _bmm_step(tmp_nd, p, v[..., j0:j1, :], tmp_nd2)
            o_rec += tmp_nd
        d_rows = np.sum(do * o_rec, axis=-1)  # (..., N)

        for j0 in range(0, nk, tile):
            j1 = min(j0 + tile, nk)
            tw = j1 - j0
            p = probs(j0, j1)
            dvt = t_td[..., :tw, :]
            dvt.fill(0)
            _bmm_step(dvt, np.swapaxes(p, -1, -2), do, tmp_td[..., :tw, :])
            dv[..., j0:j1, :] += dvt
            dp = tmp_nt[..., :tw]
            dp.fill(0)
            _bmm_step(dp, do, np.swapaxes(v[..., j0:j1, :], -1, -2), tmp_nt2[..., :tw])
            ds = p * (dp - d_rows[..., None]) * dt.type(scale)
            _bmm_step(dq, ds, k[..., j0:j1, :], tmp_nd)
            dkt = t_td[..., :tw, :]
            dkt.fill(0)
            _bmm_step(dkt, np.swapaxes(ds, -1, -2), q, tmp_td[..., :tw, :])
            dk[..., j0:j1, :] += dkt
        return dq, dk, dv
    finally:
        ws.close()


def attention_fwd(q: T.Tensor, k: T.Tensor, v: T.Tensor, scale: float | None = None,
                  tile: int = DEFAULT_ATTN_TILE,
                  system: MemorySystem | None = None
                  ) -> tuple[T.Tensor, AttentionStats]:
    """Streaming softmax(Q K^T * scale) V for one head; returns (O, row stats)."""
    for t_ in (q, k, v):
        t_.check_readable()
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ValueError(f"attention shape mismatch: {q.shape}, {k.shape}, {v.shape}")
    if q.dtype is not k.dtype or k.dtype is not v.dtype:
        raise ValueError("attention operands must share a dtype")
    ms = system or current_system()
    s = scale if scale is not None else 1.0 / np.sqrt(q.shape[-1])
    out_np, stats = _attention_fwd(q.data, k.data, v.data, s, tile, ms)
    return T.from_numpy(out_np, dtype=q.dtype, tier=q.tier), stats


def attention_bwd(q: T.Tensor, k: T.Tensor, v: T.Tensor, do: T.Tensor,
                  stats: AttentionStats, scale: float | None = None,
                  tile: int = DEFAULT_ATTN_TILE,
                  system: MemorySystem | None = None
                  ) -> tuple[T.Tensor, T.Tensor, T.Tensor]:
    if stats.row_max.shape != q.shape[:-1]:
        raise ValueError("row stats do not match the forward call's shape")
    ms = system or current_system()
    s = scale if scale is not None else 1.0 / np.sqrt(q.shape[-1])
    dq, dk, dv = _attention_bwd(q.data, k.data, v.data, do.data, stats, s, tile, ms)
    return (T.from_numpy(dq, dtype=q.dtype, tier=q.tier),
            T.from_numpy(dk, dtype=q.dtype, tier=q.tier),
            T.from_numpy(dv, dtype=q.dtype, tier=q.tier))


# -- fused elementwise -----------------------------------------------------------


def fused_scale_add(y: T.Tensor, a: T.Tensor, s: float) -> T.Tensor:
    """y <- y + s*a in a single pass (one write to y)."""
    if y.shape != a.shape:
        raise ValueError(f"fused_scale_add shape mismatch {y.shape} vs {a.shape}")
    y.check_readable()
    a.check_readable()
    tmp = np.empty_like(y.data)
    np.multiply(a.data, y.data.dtype.type(s), out=tmp)
    np.add(y.data, tmp, out=y.data)
    return y


# -- fused AdamW -----------------------------------------------------------------


@dataclass
class AdamWState:
    """First/second moments plus hyperparameters for one parameter tensor."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def for_param(cls, param, **hyper) -> "AdamWState":
        arr = param.data if isinstance(param, T.Tensor) else np.asarray(param)
        return cls(m=np.zeros_like(arr), v=np.zeros_like(arr), **hyper)


def _adamw_scalars(state: AdamWState, dt) -> tuple:
    t = state.t + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    return (dt(state.beta1), dt(1.0 - state.beta1), dt(state.beta2),
            dt(1.0 - state.beta2), dt(bc1), dt(bc2), dt(state.eps),
            dt(state.lr), dt(state.lr * state.weight_decay))


def adamw_fused_step(param, grad, state: AdamWState) -> None:
    """Single-pass AdamW update with bias correction and decoupled decay.

    Per-element operation order (each op rounds once):
      m = b1*m + (1-b1)*g
      v = b2*v + (1-b2)*(g*g)
      denom = sqrt(v/bc2) + eps
      step = lr * ((m/bc1) / denom)
      p = (p - step) - (lr*wd)*p_old
    The unfused reference below applies the identical sequence, so the two
    agree bitwise; fusion only changes memory traffic.
    """
    p = param.data if isinstance(param, T.Tensor) else param
    g = grad.data if isinstance(grad, T.Tensor) else grad
    if g.shape != p.shape or state.m.shape != p.shape:
        raise ValueError("adamw shapes must match the parameter")
    dt = p.dtype.type
    b1, omb1, b2, omb2, bc1, bc2, eps, lr, lrwd = _adamw_scalars(state, dt)
    m, v = state.m, state.v
    tmp = np.empty_like(p)

    np.multiply(m, b1, out=m)
    np.multiply(g, omb1, out=tmp)
    np.add(m, tmp, out=m)

    np.multiply(v, b2, out=v)
    np.multiply(g, g, out=tmp)
    np.multiply(tmp, omb2, out=tmp)
    np.add(v, tmp, out=v)

    denom = np.divide(v, bc2, out=tmp)
    np.sqrt(denom, out=denom)
    np.add(denom, eps, out=denom)

    step = np.divide(m, bc1)
    np.divide(step, denom, out=step)
    np.multiply(step, lr, out=step)

    decay = np.multiply(p, lrwd, out=tmp)  # uses p before the update
    np.subtract(p, step, out=step)
    np.subtract(step, decay, out=p)
    state.t += 1


def adamw_reference_step(param, grad, state: AdamWState) -> None:
    """Five separate materializing kernels; the bitwise oracle for the fused step."""
    p = param.data if isinstance(param, T.Tensor) else param
    g = grad.data if isinstance(grad, T.Tensor) else grad
    dt = p.dtype.type
    b1, omb1, b2, omb2, bc1, bc2, eps, lr, lrwd = _adamw_scalars(state, dt)

    # kernel 1: first moment
    state.m = b1 * state.m + omb1 * g
    # kernel 2: second moment
    state.v = b2 * state.v + omb2 * (g * g)
    # kernel 3: denominator
    denom = np.sqrt(state.v / bc2) + eps
    # kernel 4: bias-corrected step
    step = lr * ((state.m / bc1) / denom)
    # kernel 5: parameter update with decoupled decay
    np.copyto(p, (p - step) - lrwd * p)
    state.t += 1
