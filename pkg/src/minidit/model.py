"""Diffusion transformer model: patch embedding, conditioned blocks, head.

The network is organized as an explicit module chain (stem -> blocks -> head)
where every module exposes forward/backward with hand-written gradients and
keeps its saved activations in arena-backed tensors. The chain threads two
values: the token sequence z and the per-sample conditioning vector c; each
block consumes and re-emits c so activation reference counting stays local.

Conditioning follows the zero-initialized gating scheme: each block projects
c into six D-vectors (shift/scale/gate for the attention branch, then for the
feed-forward branch). With the projection zero-initialized the gates are zero
and every block is transparent at init; the output head starts at zero too,
so the first-step loss sits at the mean squared norm of unit Gaussian noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from . import tensor as T
from .gemm import TileConfig, gemm, gemm_bias
from .memory import MemorySystem, current_system

MODULATION_FIELDS = ("shift_msa", "scale_msa", "gate_msa",
                     "shift_ffn", "scale_ffn", "gate_ffn")


@dataclass
class DiTConfig:
    h: int = 16
    w: int = 16
    c_in: int = 4
    patch: int = 2
    dim: int = 64
    layers: int = 4
    heads: int = 4
    num_classes: int = 8
    t_steps: int = 1000
    time_embed_dim: int = 256
    mlp_ratio: int = 4
    attn_tile: int = 64
    dtype: T.Dtype = T.Dtype.F32

    def validate(self) -> None:
        if self.h % self.patch or self.w % self.patch:
            raise ValueError(f"latent extents {self.h}x{self.w} not divisible by patch {self.patch}")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        for name in ("h", "w", "c_in", "patch", "dim", "layers", "heads",
                     "num_classes", "t_steps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def n_tokens(self) -> int:
        return (self.h // self.patch) * (self.w // self.patch)

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.c_in

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


# Hidden width / depth / heads per size tag; the toy config is the test target.
MODEL_PRESETS: dict[str, dict] = {
    "toy": dict(h=16, w=16, c_in=4, patch=2, dim=64, layers=4, heads=4,
                num_classes=8, attn_tile=16),
    "S/2": dict(h=32, w=32, c_in=4, patch=2, dim=384, layers=12, heads=6, num_classes=1000),
    "B/2": dict(h=32, w=32, c_in=4, patch=2, dim=768, layers=12, heads=12, num_classes=1000),
    "L/2": dict(h=32, w=32, c_in=4, patch=2, dim=1024, layers=24, heads=16, num_classes=1000),
    "XL/2": dict(h=32, w=32, c_in=4, patch=2, dim=1152, layers=28, heads=16, num_classes=1000),
}


def config_for_model(name: str, dtype: T.Dtype = T.Dtype.F32) -> DiTConfig:
    if name not in MODEL_PRESETS:
        raise ValueError(f"unknown model {name!r}; choices: {sorted(MODEL_PRESETS)}")
    cfg = DiTConfig(dtype=dtype, **MODEL_PRESETS[name])
    cfg.validate()
    return cfg


# -- patch layout ---------------------------------------------------------------


def to_patches(x: np.ndarray, p: int) -> np.ndarray:
    """(B, H, W, C) -> (B, N, p*p*C), patches in row-major grid order."""
    b, h, w, c = x.shape
    hp, wp = h // p, w // p
    t = x.reshape(b, hp, p, wp, p, c).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(t).reshape(b, hp * wp, p * p * c)


def from_patches(tok: np.ndarray, p: int, h: int, w: int, c: int) -> np.ndarray:
    """Inverse of to_patches; exact layout round-trip."""
    b = tok.shape[0]
    hp, wp = h // p, w // p
    t = tok.reshape(b, hp, wp, p, p, c).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(t).reshape(b, h, w, c)


def patchify(x_t: T.Tensor, w_embed: T.Tensor, bias: T.Tensor,
             cfg: DiTConfig, tile: TileConfig | None = None) -> T.Tensor:
    """Row i of the output is the linear projection of flattened patch i."""
    b = x_t.shape[0]
    patches = to_patches(x_t.data, cfg.patch)
    z = T.empty((b, cfg.n_tokens, cfg.dim), x_t.dtype, tier=x_t.tier)
    gemm_bias(patches.reshape(-1, cfg.patch_dim), w_embed.data, bias.data,
              z.data.reshape(-1, cfg.dim), cfg=tile)
    return z


def depatchify(tokens: T.Tensor, cfg: DiTConfig) -> T.Tensor:
    """(B, N, p*p*C) token grid back to (B, H, W, C)."""
    if tokens.shape[-1] != cfg.patch_dim or tokens.shape[-2] != cfg.n_tokens:
        raise ValueError(f"depatchify shape {tokens.shape} does not match config")
    out_np = from_patches(tokens.data, cfg.patch, cfg.h, cfg.w, cfg.c_in)
    return T.from_numpy(out_np, dtype=tokens.dtype, tier=tokens.tier)


def timestep_embedding(t_idx: np.ndarray, dim: int, dtype: np.dtype) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps, (B, dim)."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    args = t_idx.astype(np.float64)[:, None] * freqs[None, :]
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=1)
    return emb.astype(dtype)


# -- diffusion schedule -----------------------------------------------------------


@dataclass
class DiffusionSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @classmethod
    def linear(cls, t_steps: int = 1000, beta_start: float = 1e-4,
               beta_end: float = 2e-2) -> "DiffusionSchedule":
        betas = np.linspace(beta_start, beta_end, t_steps, dtype=np.float64)
        alphas = 1.0 - betas
        sched = cls(betas=betas, alphas=alphas, alpha_bars=np.cumprod(alphas))
        sched.validate()
        return sched

    def validate(self) -> None:
        if np.any(self.betas <= 0) or np.any(self.betas >= 1):
            raise ValueError("betas must lie strictly in (0, 1)")
        if np.any(np.diff(self.alpha_bars) >= 0):
            raise ValueError("alpha_bar must be strictly decreasing")


def ddpm_noise(x0: np.ndarray, t: np.ndarray, eps: np.ndarray,
               schedule: DiffusionSchedule) -> np.ndarray:
    """x_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps, per sample."""
    if eps.shape != x0.shape:
        raise ValueError("eps must match x0's shape")
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t >= len(schedule.alpha_bars)):
        raise ValueError("timestep out of schedule range")
    abar = schedule.alpha_bars[t]
    s1 = np.sqrt(abar).astype(x0.dtype)
    s2 = np.sqrt(1.0 - abar).astype(x0.dtype)
    expand = (slice(None),) + (None,) * (x0.ndim - 1)
    return s1[expand] * x0 + s2[expand] * eps


# -- parameters -------------------------------------------------------------------


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int,
            shape, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class ParamSet:
    """Named parameter tensors in registration order."""

    def __init__(self):
        self._params: dict[str, T.Tensor] = {}

    def register(self, name: str, arr: np.ndarray, dtype: T.Dtype,
                 system: MemorySystem) -> T.Tensor:
        t = T.from_numpy(arr, dtype=dtype, system=system, name=name, requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> T.Tensor:
        return self._params[name]

    def names(self) -> list[str]:
        return list(self._params.keys())

    def tensors(self) -> list[T.Tensor]:
        return list(self._params.values())

    def items(self):
        return self._params.items()

    def count_elements(self) -> int:
        return sum(p.size for p in self._params.values())


# -- modules ----------------------------------------------------------------------


class Module:
    """One schedulable unit: forward/backward plus its parameter tensors."""

    name = "module"

    def __init__(self):
        self.params: list[T.Tensor] = []
        self.ctx: dict = {}

    def forward(self, inputs: tuple) -> tuple:
        raise NotImplementedError

    def backward(self, grad_outputs: tuple) -> tuple:
        raise NotImplementedError

    def ctx_tensors(self) -> list[T.Tensor]:
        return [v for v in self.ctx.values() if isinstance(v, T.Tensor)]

    def clear_ctx(self) -> None:
        self.ctx = {}

    def _set_grad(self, param: T.Tensor, arr: np.ndarray) -> None:
        g = T.from_numpy(arr, dtype=param.dtype, name=f"{param.name}.grad")
        param.set_grad(g)


def _sum_rows(x2d: np.ndarray) -> np.ndarray:
    return np.sum(x2d, axis=0)


class StemModule(Module):
    """Patch projection plus timestep/label conditioning."""

    def __init__(self, cfg: DiTConfig, ps: ParamSet, rng: np.random.Generator,
                 system: MemorySystem, tile: TileConfig):
        super().__init__()
        self.name = "stem"
        self.cfg = cfg
        self.tile = tile
        dt = cfg.dtype
        npdt = dt.np
        pd, d, te = cfg.patch_dim, cfg.dim, cfg.time_embed_dim
        self.w_embed = ps.register("patch_embed.w", _xavier(rng, pd, d, (pd, d), npdt), dt, system)
        self.b_embed = ps.register("patch_embed.b", np.zeros(d, npdt), dt, system)
        self.t_w1 = ps.register("time_mlp.w1", _xavier(rng, te, d, (te, d), npdt), dt, system)
        self.t_b1 = ps.register("time_mlp.b1", np.zeros(d, npdt), dt, system)
        self.t_w2 = ps.register("time_mlp.w2", _xavier(rng, d, d, (d, d), npdt), dt, system)
        self.t_b2 = ps.register("time_mlp.b2", np.zeros(d, npdt), dt, system)
        # index num_classes is the unconditional/null token
        self.label_table = ps.register(
            "label_embed.table",
            (rng.standard_normal((cfg.num_classes + 1, d)) * 0.02).astype(npdt),
            dt, system)
        self.params = [self.w_embed, self.b_embed, self.t_w1, self.t_b1,
                       self.t_w2, self.t_b2, self.label_table]
        self.t_idx: np.ndarray | None = None
        self.y_idx: np.ndarray | None = None

    def set_step_inputs(self, t_idx: np.ndarray, y_idx: np.ndarray) -> None:
        if np.any(t_idx < 0) or np.any(t_idx >= self.cfg.t_steps):
            raise ValueError("timestep index out of range")
        if np.any(y_idx < 0) or np.any(y_idx > self.cfg.num_classes):
            raise ValueError("label index out of range")
        self.t_idx = np.asarray(t_idx, dtype=np.int64)
        self.y_idx = np.asarray(y_idx, dtype=np.int64)

    def forward(self, inputs: tuple) -> tuple:
        (x_t,) = inputs
        cfg = self.cfg
        b = x_t.shape[0]
        if self.t_idx is None or len(self.t_idx) != b:
            raise ValueError("set_step_inputs(t, y) must be called before forward")
        patches = T.from_numpy(to_patches(x_t.data, cfg.patch), dtype=x_t.dtype,
                               name="stem.patches")
        z = T.empty((b, cfg.n_tokens, cfg.dim), x_t.dtype, name="stem.z")
        gemm_bias(patches.data.reshape(-1, cfg.patch_dim), self.w_embed.data,
                  self.b_embed.data, z.data.reshape(-1, cfg.dim), cfg=self.tile)

        temb_np = timestep_embedding(self.t_idx, cfg.time_embed_dim, cfg.dtype.np)
        temb = T.from_numpy(temb_np, dtype=x_t.dtype, name="stem.temb")
        h_pre = T.empty((b, cfg.dim), x_t.dtype, name="stem.h_pre")
        gemm_bias(temb.data, self.t_w1.data, self.t_b1.data, h_pre.data, cfg=self.tile)
        h_act = T.from_numpy(ops._silu_fwd(h_pre.data), dtype=x_t.dtype, name="stem.h_act")
        c = T.empty((b, cfg.dim), x_t.dtype, name="stem.c")
        gemm_bias(h_act.data, self.t_w2.data, self.t_b2.data, c.data, cfg=self.tile)
        np.add(c.data, self.label_table.data[self.y_idx], out=c.data)

        self.ctx = {"patches": patches, "temb": temb, "h_pre": h_pre, "h_act": h_act}
        return (z, c)

    def backward(self, grad_outputs: tuple) -> tuple:
        dz, dc = grad_outputs
        cfg = self.cfg
        patches = self.ctx["patches"].data.reshape(-1, cfg.patch_dim)
        dz2 = dz.data.reshape(-1, cfg.dim)
        dw = np.empty_like(self.w_embed.data)
        gemm(patches.T, dz2, dw, cfg=self.tile)
        self._set_grad(self.w_embed, dw)
        self._set_grad(self.b_embed, _sum_rows(dz2))

        dtable = np.zeros_like(self.label_table.data)
        np.add.at(dtable, self.y_idx, dc.data)
        self._set_grad(self.label_table, dtable)

        h_act = self.ctx["h_act"].data
        dw2 = np.empty_like(self.t_w2.data)
        gemm(h_act.T, dc.data, dw2, cfg=self.tile)
        self._set_grad(self.t_w2, dw2)
        self._set_grad(self.t_b2, _sum_rows(dc.data))
        dh_act = np.empty_like(h_act)
        gemm(dc.data, self.t_w2.data.T, dh_act, cfg=self.tile)
        dh_pre = ops._silu_bwd(self.ctx["h_pre"].data, dh_act)
        dw1 = np.empty_like(self.t_w1.data)
        gemm(self.ctx["temb"].data.T, dh_pre, dw1, cfg=self.tile)
        self._set_grad(self.t_w1, dw1)
        self._set_grad(self.t_b1, _sum_rows(dh_pre))
        return (None,)


class BlockModule(Module):
    """Conditioned transformer block: gated attention and feed-forward branches."""

    def __init__(self, index: int, cfg: DiTConfig, ps: ParamSet,
                 rng: np.random.Generator, system: MemorySystem, tile: TileConfig):
        super().__init__()
        self.name = f"block{index}"
        self.cfg = cfg
        self.tile = tile
        d = cfg.dim
        hidden = cfg.mlp_ratio * d
        dt = cfg.dtype
        npdt = dt.np

        def reg(suffix: str, arr: np.ndarray) -> T.Tensor:
            return ps.register(f"{self.name}.{suffix}", arr, dt, system)

        self.qkv_w = reg("qkv.w", _xavier(rng, d, 3 * d, (d, 3 * d), npdt))
        self.qkv_b = reg("qkv.b", np.zeros(3 * d, npdt))
        self.o_w = reg("o_proj.w", _xavier(rng, d, d, (d, d), npdt))
        self.o_b = reg("o_proj.b", np.zeros(d, npdt))
        self.up_w = reg("up_proj.w", _xavier(rng, d, hidden, (d, hidden), npdt))
        self.up_b = reg("up_proj.b", np.zeros(hidden, npdt))
        self.down_w = reg("down_proj.w", _xavier(rng, hidden, d, (hidden, d), npdt))
        self.down_b = reg("down_proj.b", np.zeros(d, npdt))
        # zero-initialized conditioning projection: gates are zero at init
        self.cond_w = reg("condition_proj.w", np.zeros((d, 6 * d), npdt))
        self.cond_b = reg("condition_proj.b", np.zeros(6 * d, npdt))
        self.ln1_g = reg("ln1.g", np.ones(d, npdt))
        self.ln1_b = reg("ln1.b", np.zeros(d, npdt))
        self.ln2_g = reg("ln2.g", np.ones(d, npdt))
        self.ln2_b = reg("ln2.b", np.zeros(d, npdt))
        self.params = [self.qkv_w, self.qkv_b, self.o_w, self.o_b, self.up_w,
                       self.up_b, self.down_w, self.down_b, self.cond_w,
                       self.cond_b, self.ln1_g, self.ln1_b, self.ln2_g, self.ln2_b]

    def _heads_split(self, qkv: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        b, n, _ = qkv.shape
        h, dh = self.cfg.heads, self.cfg.head_dim
        arr = qkv.reshape(b, n, 3, h, dh)
        q = np.ascontiguousarray(arr[:, :, 0].transpose(0, 2, 1, 3)).reshape(b * h, n, dh)
        k = np.ascontiguousarray(arr[:, :, 1].transpose(0, 2, 1, 3)).reshape(b * h, n, dh)
        v = np.ascontiguousarray(arr[:, :, 2].transpose(0, 2, 1, 3)).reshape(b * h, n, dh)
        return q, k, v

    def _heads_merge(self, o: np.ndarray, b: int, n: int) -> np.ndarray:
        h, dh = self.cfg.heads, self.cfg.head_dim
        return np.ascontiguousarray(
            o.reshape(b, h, n, dh).transpose(0, 2, 1, 3)).reshape(b, n, h * dh)

    def forward(self, inputs: tuple) -> tuple:
        z, c = inputs
        cfg = self.cfg
        b, n, d = z.shape
        dt = z.dtype

        mod = T.empty((b, 6 * d), dt, name=f"{self.name}.mod")
        gemm_bias(c.data, self.cond_w.data, self.cond_b.data, mod.data, cfg=self.tile)
        mods = {nm: mod.data[:, i * d:(i + 1) * d] for i, nm in enumerate(MODULATION_FIELDS)}

        ln1, mu1, rs1 = ops._layernorm_fwd(z.data, self.ln1_g.data, self.ln1_b.data, 1e-6)
        xm1 = T.from_numpy(
            mods["scale_msa"][:, None, :] * ln1 + mods["shift_msa"][:, None, :],
            dtype=dt, name=f"{self.name}.xmod1")

        qkv = np.empty((b, n, 3 * d), dtype=dt.np)
        gemm_bias(xm1.data.reshape(-1, d), self.qkv_w.data, self.qkv_b.data,
                  qkv.reshape(-1, 3 * d), cfg=self.tile)
        q, k, v = self._heads_split(qkv)
        q_t = T.from_numpy(q, dtype=dt, name=f"{self.name}.q")
        k_t = T.from_numpy(k, dtype=dt, name=f"{self.name}.k")
        v_t = T.from_numpy(v, dtype=dt, name=f"{self.name}.v")
        scale = 1.0 / np.sqrt(cfg.head_dim)
        o_np, stats = ops._attention_fwd(q_t.data, k_t.data, v_t.data, scale,
                                         cfg.attn_tile, current_system())
        attn_cat = T.from_numpy(self._heads_merge(o_np, b, n), dtype=dt,
                                name=f"{self.name}.attn")

        proj = T.empty((b, n, d), dt, name=f"{self.name}.proj")
        gemm_bias(attn_cat.data.reshape(-1, d), self.o_w.data, self.o_b.data,
                  proj.data.reshape(-1, d), cfg=self.tile)
        z_mid = T.from_numpy(z.data + mods["gate_msa"][:, None, :] * proj.data,
                             dtype=dt, name=f"{self.name}.zmid")

        ln2, mu2, rs2 = ops._layernorm_fwd(z_mid.data, self.ln2_g.data,
                                           self.ln2_b.data, 1e-6)
        xm2 = T.from_numpy(
            mods["scale_ffn"][:, None, :] * ln2 + mods["shift_ffn"][:, None, :],
            dtype=dt, name=f"{self.name}.xmod2")

        hidden = cfg.mlp_ratio * d
        up = T.empty((b, n, hidden), dt, name=f"{self.name}.up")
        gemm_bias(xm2.data.reshape(-1, d), self.up_w.data, self.up_b.data,
                  up.data.reshape(-1, hidden), cfg=self.tile)
        act = T.from_numpy(ops._gelu_fwd(up.data), dtype=dt, name=f"{self.name}.act")
        down = T.empty((b, n, d), dt, name=f"{self.name}.down")
        gemm_bias(act.data.reshape(-1, hidden), self.down_w.data, self.down_b.data,
                  down.data.reshape(-1, d), cfg=self.tile)
        z_out = T.from_numpy(z_mid.data + mods["gate_ffn"][:, None, :] * down.data,
                             dtype=dt, name=f"{self.name}.zout")

        # normalized views are recomputed in backward from (mean, rstd); the
        # fused qkv is never saved, only its head-split copies
        self.ctx = {"z": z, "c": c, "mod": mod, "mu1": mu1, "rs1": rs1,
                    "xm1": xm1, "q": q_t, "k": k_t, "v": v_t,
                    "stats": stats, "attn": attn_cat, "proj": proj, "zmid": z_mid,
                    "mu2": mu2, "rs2": rs2, "xm2": xm2,
                    "up": up, "act": act, "down": down}
        return (z_out, c)

    def backward(self, grad_outputs: tuple) -> tuple:
        dz_out, dc_in = grad_outputs
        cfg = self.cfg
        ctx = self.ctx
        z = ctx["z"]
        b, n, d = z.shape
        hidden = cfg.mlp_ratio * d
        mod = ctx["mod"].data
        mods = {nm: mod[:, i * d:(i + 1) * d] for i, nm in enumerate(MODULATION_FIELDS)}
        dmod = np.zeros_like(mod)
        dms = {nm: dmod[:, i * d:(i + 1) * d] for i, nm in enumerate(MODULATION_FIELDS)}

        # feed-forward branch
        dz_mid = dz_out.data.copy()
        np.sum(dz_out.data * ctx["down"].data, axis=1, out=dms["gate_ffn"])
        d_down = (dz_out.data * mods["gate_ffn"][:, None, :]).reshape(-1, d)
        act2 = ctx["act"].data.reshape(-1, hidden)
        dw = np.empty_like(self.down_w.data)
        gemm(act2.T, d_down, dw, cfg=self.tile)
        self._set_grad(self.down_w, dw)
        self._set_grad(self.down_b, _sum_rows(d_down))
        dact = np.empty((b * n, hidden), dtype=z.dtype.np)
        gemm(d_down, self.down_w.data.T, dact, cfg=self.tile)
        dup = ops._gelu_bwd(ctx["up"].data.reshape(-1, hidden), dact)
        xm2_2 = ctx["xm2"].data.reshape(-1, d)
        dw = np.empty_like(self.up_w.data)
        gemm(xm2_2.T, dup, dw, cfg=self.tile)
        self._set_grad(self.up_w, dw)
        self._set_grad(self.up_b, _sum_rows(dup))
        dxm2 = np.empty((b * n, d), dtype=z.dtype.np)
        gemm(dup, self.up_w.data.T, dxm2, cfg=self.tile)
        dxm2 = dxm2.reshape(b, n, d)

        ln2 = ((ctx["zmid"].data - ctx["mu2"][..., None]) * ctx["rs2"][..., None]
               * self.ln2_g.data + self.ln2_b.data)
        np.sum(dxm2 * ln2, axis=1, out=dms["scale_ffn"])
        np.sum(dxm2, axis=1, out=dms["shift_ffn"])
        dln2 = dxm2 * mods["scale_ffn"][:, None, :]
        dzm, dg2, db2 = ops._layernorm_bwd(ctx["zmid"].data, self.ln2_g.data,
                                           ctx["mu2"], ctx["rs2"], dln2)
        self._set_grad(self.ln2_g, dg2)
        self._set_grad(self.ln2_b, db2)
        dz_mid += dzm

        # attention branch
        np.sum(dz_mid * ctx["proj"].data, axis=1, out=dms["gate_msa"])
        dproj = (dz_mid * mods["gate_msa"][:, None, :]).reshape(-1, d)
        attn2 = ctx["attn"].data.reshape(-1, d)
        dw = np.empty_like(self.o_w.data)
        gemm(attn2.T, dproj, dw, cfg=self.tile)
        self._set_grad(self.o_w, dw)
        self._set_grad(self.o_b, _sum_rows(dproj))
        dattn = np.empty((b * n, d), dtype=z.dtype.np)
        gemm(dproj, self.o_w.data.T, dattn, cfg=self.tile)

        h, dh_ = cfg.heads, cfg.head_dim
        do = np.ascontiguousarray(
            dattn.reshape(b, n, h, dh_).transpose(0, 2, 1, 3)).reshape(b * h, n, dh_)
        scale = 1.0 / np.sqrt(cfg.head_dim)
        dq, dk, dv = ops._attention_bwd(ctx["q"].data, ctx["k"].data, ctx["v"].data,
                                        do, ctx["stats"], scale, cfg.attn_tile,
                                        current_system())
        dqkv = np.empty((b, n, 3, h, dh_), dtype=z.dtype.np)
        dqkv[:, :, 0] = dq.reshape(b, h, n, dh_).transpose(0, 2, 1, 3)
        dqkv[:, :, 1] = dk.reshape(b, h, n, dh_).transpose(0, 2, 1, 3)
        dqkv[:, :, 2] = dv.reshape(b, h, n, dh_).transpose(0, 2, 1, 3)
        dqkv = dqkv.reshape(-1, 3 * d)
        xm1_2 = ctx["xm1"].data.reshape(-1, d)
        dw = np.empty_like(self.qkv_w.data)
        gemm(xm1_2.T, dqkv, dw, cfg=self.tile)
        self._set_grad(self.qkv_w, dw)
        self._set_grad(self.qkv_b, _sum_rows(dqkv))
        dxm1 = np.empty((b * n, d), dtype=z.dtype.np)
        gemm(dqkv, self.qkv_w.data.T, dxm1, cfg=self.tile)
        dxm1 = dxm1.reshape(b, n, d)

        ln1 = ((z.data - ctx["mu1"][..., None]) * ctx["rs1"][..., None]
               * self.ln1_g.data + self.ln1_b.data)
        np.sum(dxm1 * ln1, axis=1, out=dms["scale_msa"])
        np.sum(dxm1, axis=1, out=dms["shift_msa"])
        dln1 = dxm1 * mods["scale_msa"][:, None, :]
        dz_in, dg1, db1 = ops._layernorm_bwd(z.data, self.ln1_g.data,
                                             ctx["mu1"], ctx["rs1"], dln1)
        self._set_grad(self.ln1_g, dg1)
        self._set_grad(self.ln1_b, db1)
        dz_in = dz_in + dz_mid

        # conditioning projection
        c = ctx["c"]
        dw = np.empty_like(self.cond_w.data)
        gemm(c.data.T, dmod, dw, cfg=self.tile)
        self._set_grad(self.cond_w, dw)
        self._set_grad(self.cond_b, _sum_rows(dmod))
        dc_own = np.empty((b, d), dtype=z.dtype.np)
        gemm(dmod, self.cond_w.data.T, dc_own, cfg=self.tile)
        dc_out = T.from_numpy(dc_in.data + dc_own, dtype=z.dtype,
                              name=f"{self.name}.dc")
        dz_t = T.from_numpy(dz_in, dtype=z.dtype, name=f"{self.name}.dz")
        return (dz_t, dc_out)


class HeadModule(Module):
    """Final norm, zero-initialized projection, and de-patchify."""

    def __init__(self, cfg: DiTConfig, ps: ParamSet, rng: np.random.Generator,
                 system: MemorySystem, tile: TileConfig):
        super().__init__()
        self.name = "head"
        self.cfg = cfg
        self.tile = tile
        d, pd = cfg.dim, cfg.patch_dim
        npdt = cfg.dtype.np
        self.fn_g = ps.register("final_norm.g", np.ones(d, npdt), cfg.dtype, system)
        self.fn_b = ps.register("final_norm.b", np.zeros(d, npdt), cfg.dtype, system)
        self.head_w = ps.register("head.w", np.zeros((d, pd), npdt), cfg.dtype, system)
        self.head_b = ps.register("head.b", np.zeros(pd, npdt), cfg.dtype, system)
        self.params = [self.fn_g, self.fn_b, self.head_w, self.head_b]

    def forward(self, inputs: tuple) -> tuple:
        z, c = inputs
        cfg = self.cfg
        b, n, d = z.shape
        lnf, mu, rs = ops._layernorm_fwd(z.data, self.fn_g.data, self.fn_b.data, 1e-6)
        lnf_t = T.from_numpy(lnf, dtype=z.dtype, name="head.lnf")
        tokens = T.empty((b, n, cfg.patch_dim), z.dtype, name="head.tokens")
        gemm_bias(lnf.reshape(-1, d), self.head_w.data, self.head_b.data,
                  tokens.data.reshape(-1, cfg.patch_dim), cfg=self.tile)
        eps_hat = depatchify(tokens, cfg)
        eps_hat.name = "head.eps_hat"
        self.ctx = {"z": z, "c": c, "lnf": lnf_t, "mu": mu, "rs": rs}
        return (eps_hat,)

    def backward(self, grad_outputs: tuple) -> tuple:
        (d_eps,) = grad_outputs
        cfg = self.cfg
        z = self.ctx["z"]
        b, n, d = z.shape
        dtok = to_patches(d_eps.data, cfg.patch).reshape(-1, cfg.patch_dim)
        lnf2 = self.ctx["lnf"].data.reshape(-1, d)
        dw = np.empty_like(self.head_w.data)
        gemm(lnf2.T, dtok, dw, cfg=self.tile)
        self._set_grad(self.head_w, dw)
        self._set_grad(self.head_b, _sum_rows(dtok))
        dlnf = np.empty((b * n, d), dtype=z.dtype.np)
        gemm(dtok, self.head_w.data.T, dlnf, cfg=self.tile)
        dz, dg, db = ops._layernorm_bwd(z.data, self.fn_g.data, self.ctx["mu"],
                                        self.ctx["rs"], dlnf.reshape(b, n, d))
        self._set_grad(self.fn_g, dg)
        self._set_grad(self.fn_b, db)
        dz_t = T.from_numpy(dz, dtype=z.dtype, name="head.dz")
        dc = T.zeros((b, d), z.dtype, name="head.dc")
        return (dz_t, dc)


# -- the assembled network -----------------------------------------------------------


class DiTModel:
    """Module chain plus parameter registry; one instance per training flow."""

    def __init__(self, cfg: DiTConfig, seed: int = 0,
                 system: MemorySystem | None = None,
                 tile: TileConfig | None = None):
        cfg.validate()
        self.cfg = cfg
        self.system = system or current_system()
        self.tile = tile or TileConfig()
        self.params = ParamSet()
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence((seed, 0x9E3779B9))))
        self.stem = StemModule(cfg, self.params, rng, self.system, self.tile)
        self.blocks = [BlockModule(i, cfg, self.params, rng, self.system, self.tile)
                       for i in range(cfg.layers)]
        self.head = HeadModule(cfg, self.params, rng, self.system, self.tile)
        self.modules: list[Module] = [self.stem, *self.blocks, self.head]

    def forward(self, x_t: T.Tensor, t_idx: np.ndarray, y_idx: np.ndarray) -> T.Tensor:
        self.stem.set_step_inputs(t_idx, y_idx)
        outputs: tuple = (x_t,)
        for mod in self.modules:
            outputs = mod.forward(outputs)
        return outputs[0]

    def condition_embed(self, t_idx, y_idx) -> list[dict[str, np.ndarray]]:
        """Per-block modulation set {shift, scale, gate} x {msa, ffn} for (t, y).

        Bitwise identical to the vectors the blocks compute during forward."""
        self.stem.set_step_inputs(np.asarray(t_idx), np.asarray(y_idx))
        stem = self.stem
        cfg = self.cfg
        temb = timestep_embedding(stem.t_idx, cfg.time_embed_dim, cfg.dtype.np)
        b = len(stem.t_idx)
        h_pre = np.empty((b, cfg.dim), dtype=cfg.dtype.np)
        gemm_bias(temb, stem.t_w1.data, stem.t_b1.data, h_pre, cfg=self.tile)
        c = np.empty((b, cfg.dim), dtype=cfg.dtype.np)
        gemm_bias(ops._silu_fwd(h_pre), stem.t_w2.data, stem.t_b2.data, c,
                  cfg=self.tile)
        np.add(c, stem.label_table.data[stem.y_idx], out=c)
        out = []
        d = cfg.dim
        for blk in self.blocks:
            mod = np.empty((b, 6 * d), dtype=cfg.dtype.np)
            gemm_bias(c, blk.cond_w.data, blk.cond_b.data, mod, cfg=self.tile)
            out.append({nm: mod[:, i * d:(i + 1) * d].copy()
                        for i, nm in enumerate(MODULATION_FIELDS)})
        return out

    def backward(self, d_eps: T.Tensor) -> None:
        grads: tuple = (d_eps,)
        for mod in reversed(self.modules):
            grads = mod.backward(grads)

    def clear_ctx(self) -> None:
        for mod in self.modules:
            mod.clear_ctx()

    def param_count(self) -> int:
        return self.params.count_elements()


def make_synthetic_dataset(cfg: DiTConfig, n_samples: int, seed: int
                           ) -> tuple[np.ndarray, np.ndarray]:
    """Unit-Gaussian latents with class-dependent channel means."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 0xDA7A))))
    class_means = rng.normal(0.0, 0.5, size=(cfg.num_classes, cfg.c_in))
    labels = rng.integers(0, cfg.num_classes, size=n_samples)
    x0 = rng.standard_normal((n_samples, cfg.h, cfg.w, cfg.c_in))
    x0 += class_means[labels][:, None, None, :]
    return x0.astype(cfg.dtype.np), labels.astype(np.int64)


def sample_stream(seed: int, step: int, index: int) -> np.random.Generator:
    """Per-sample RNG keyed by (seed, step, global index); rank-split invariant."""
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence((seed, step, index))))
