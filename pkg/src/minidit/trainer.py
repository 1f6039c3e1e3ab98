"""Training orchestration: one rank's step loop with optional residency
scheduling and data-parallel gradient reduction.

Placement modes:
  automem off  -> every tensor lives Fast-resident (the unscheduled baseline;
                  exceeding the Fast capacity raises OutOfTier)
  automem on   -> tensors default to the Slow tier and the scheduler stages
                  per-module working sets through Fast

Gradient reduction modes (when a communicator is present):
  overlap on   -> reverse-order buckets, each all-reduce issued as its bucket
                  fills during backward
  overlap off  -> one blocking all-reduce after backward completes

Per-sample noise streams are keyed by (seed, step, global sample index), so a
global batch sharded across R ranks draws exactly the same (t, eps, x0) as a
single-rank run over the concatenated batch.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .automem import AutoMemEngine
from .comm import BucketReducer, Communicator
from .gemm import TileConfig
from .memory import MemConfig, MemorySystem, MemTier, MiB, use_system
from .model import (DiffusionSchedule, DiTModel, config_for_model, ddpm_noise,
                    make_synthetic_dataset, sample_stream)
from .ops import AdamWState, adamw_fused_step


@dataclass
class TrainSettings:
    model: str = "toy"
    batch: int = 16  # per-rank
    steps: int = 10
    seed: int = 0
    lr: float = 1e-4
    weight_decay: float = 0.0
    automem: bool = True
    overlap: bool = True
    bucket_bytes: float = 4 * MiB
    clusters: int = 1
    threads_per_cluster: int = 1
    fast_capacity_bytes: int = 512 * MiB
    alignment_bytes: int = 4096  # desk-scale models; the huge-page analog is 2 MiB
    throttle: str = "off"
    dataset_size: int = 128
    dtype: T.Dtype = T.Dtype.F32
    trace: bool = True

    def validate(self) -> None:
        if self.batch < 1:
            raise ValueError("per-rank batch must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")


@dataclass
class StepMetrics:
    step: int
    wall_s: float
    flops_est: float
    peak_fast_bytes: int
    peak_slow_bytes: int
    transfer_bytes: int
    collective_bytes: int
    loss: float

    def to_dict(self) -> dict:
        return {"type": "step", "step": self.step, "wall_s": self.wall_s,
                "flops_est": self.flops_est, "peak_fast_bytes": self.peak_fast_bytes,
                "peak_slow_bytes": self.peak_slow_bytes,
                "transfer_bytes": self.transfer_bytes,
                "collective_bytes": self.collective_bytes, "loss": self.loss}


FLOPS_FORMULA = "flops_per_step = 6 * param_count * global_batch * tokens_per_sample"


class Trainer:
    """One data-parallel rank: model, optimizer states, and the step loop."""

    def __init__(self, settings: TrainSettings, comm: Communicator | None = None,
                 system: MemorySystem | None = None, tile: TileConfig | None = None):
        settings.validate()
        self.s = settings
        self.comm = comm
        self.rank = comm.rank if comm else 0
        self.world = comm.size if comm else 1
        if system is None:
            system = MemorySystem(MemConfig(
                fast_capacity_bytes=settings.fast_capacity_bytes,
                alignment_bytes=settings.alignment_bytes,
                throttle_preset=settings.throttle), trace=settings.trace)
        self.system = system
        if not settings.automem:
            system.set_base_tier(MemTier.FAST)
        self._sys_ctx = use_system(system)
        self._sys_ctx.__enter__()

        self.tile = tile or TileConfig(clusters=settings.clusters,
                                       threads_per_cluster=settings.threads_per_cluster)
        self.cfg = config_for_model(settings.model, dtype=settings.dtype)
        self.model = DiTModel(self.cfg, seed=settings.seed, system=system,
                              tile=self.tile)
        self.schedule = DiffusionSchedule.linear(self.cfg.t_steps)
        self.data_x, self.data_y = make_synthetic_dataset(
            self.cfg, settings.dataset_size, settings.seed)
        self.opt: dict[str, AdamWState] = {
            name: AdamWState.for_param(p, lr=settings.lr,
                                       weight_decay=settings.weight_decay)
            for name, p in self.model.params.items()}
        self.engine: AutoMemEngine | None = None
        if settings.automem:
            self.engine = AutoMemEngine(system, self.model.modules)
            self.model.modules = self.engine.wrapped
            self._warmup()
        self.reducer: BucketReducer | None = None
        if comm is not None and comm.size > 1:
            threshold = settings.bucket_bytes if settings.overlap else float("inf")
            self.reducer = BucketReducer(comm, self.model.params.tensors(),
                                         threshold_bytes=threshold)
        self.step_count = 0

    # -- lifecycle ---------------------------------------------------------------

    def _warmup(self) -> None:
        x, t, y, _ = self._build_batch(step=0)
        stem = self.model.modules[0]

        def run():
            self.engine.record_step_inputs((x,))
            stem.set_step_inputs(t, y)
            out: tuple = (x,)
            for mod in self.model.modules:
                out = mod.forward(out)

        self.engine.warmup(run)
        x.free()

    def close(self) -> None:
        self._sys_ctx.__exit__(None, None, None)
        self.system.close()

    # -- data ---------------------------------------------------------------------

    def _build_batch(self, step: int):
        s = self.s
        global_batch = s.batch * self.world
        xs, ts, ys, eps = [], [], [], []
        n = len(self.data_x)
        for j in range(self.rank * s.batch, (self.rank + 1) * s.batch):
            idx = (step * global_batch + j) % n
            stream = sample_stream(s.seed, step, j)
            t_j = int(stream.integers(0, self.cfg.t_steps))
            e_j = stream.standard_normal(self.data_x.shape[1:])
            xs.append(self.data_x[idx])
            ys.append(self.data_y[idx])
            ts.append(t_j)
            eps.append(e_j)
        x0 = np.stack(xs).astype(self.cfg.dtype.np)
        eps_arr = np.stack(eps).astype(self.cfg.dtype.np)
        t_arr = np.array(ts, dtype=np.int64)
        x_t = ddpm_noise(x0, t_arr, eps_arr, self.schedule)
        x_tensor = T.from_numpy(x_t, dtype=self.cfg.dtype, name="batch.x_t")
        return x_tensor, t_arr, np.array(ys, dtype=np.int64), eps_arr

    # -- one step -------------------------------------------------------------------

    def flops_per_step(self) -> float:
        tokens = self.s.batch * self.world * self.cfg.n_tokens
        return 6.0 * self.model.param_count() * tokens

    def train_step(self, step: int | None = None) -> StepMetrics:
        s = self.s
        step = self.step_count if step is None else step
        self.system.fast.reset_peak()
        self.system.slow.reset_peak()
        transfer0 = self.system.engine.bytes_moved
        coll0 = self.comm.bytes_moved if self.comm else 0
        t_start = time.perf_counter()

        x_t, t_arr, y_arr, eps_arr = self._build_batch(step)
        params = self.model.params.tensors()
        if self.engine is not None:
            self.engine.begin_step((x_t,))
            if self.reducer is not None and s.overlap:
                self.engine.blocking_grad_params = {p.id for p in params}
                self.engine.grad_callback = self.reducer.on_grad_ready
            else:
                self.engine.blocking_grad_params = set()
                self.engine.grad_callback = None
        elif self.reducer is not None and s.overlap:
            for p in params:
                p.on_grad = self.reducer.on_grad_ready

        stem = self.model.modules[0]
        stem.set_step_inputs(t_arr, y_arr)
        out: tuple = (x_t,)
        for mod in self.model.modules:
            out = mod.forward(out)
        eps_hat = out[0]

        diff = eps_hat.data - eps_arr
        loss = float(np.mean(diff * diff))
        d_eps = T.from_numpy(2.0 * diff / diff.size, dtype=self.cfg.dtype,
                             name="loss.d_eps")
        grads: tuple = (d_eps,)
        for mod in reversed(self.model.modules):
            grads = mod.backward(grads)

        if self.engine is not None:
            if self.reducer is not None and not s.overlap:
                self.engine.finish_step()  # settle grad offloads before reading
                for p in params:
                    self.reducer.on_grad_ready(p)
                self.reducer.finish()
            else:
                if self.reducer is not None:
                    self.reducer.finish()
                self.engine.finish_step()
        elif self.reducer is not None:
            if not s.overlap:
                for p in params:
                    self.reducer.on_grad_ready(p)
            self.reducer.finish()
            if s.overlap:
                for p in params:
                    p.on_grad = None

        for name, p in self.model.params.items():
            adamw_fused_step(p, p.grad, self.opt[name])

        if self.comm is not None and self.comm.size > 1:
            lbuf = np.array([loss], dtype=np.float64)
            self.comm.allreduce_async(lbuf).wait()
            loss = float(lbuf[0] / self.comm.size)

        if self.engine is None:
            eps_hat.free()
            x_t.free()
            self.model.clear_ctx()

        wall = time.perf_counter() - t_start
        self.step_count = step + 1
        return StepMetrics(
            step=step, wall_s=wall,
            flops_est=self.flops_per_step() / max(wall, 1e-12),
            peak_fast_bytes=self.system.fast.peak_bytes,
            peak_slow_bytes=self.system.slow.peak_bytes,
            transfer_bytes=self.system.engine.bytes_moved - transfer0,
            collective_bytes=(self.comm.bytes_moved if self.comm else 0) - coll0,
            loss=loss)

    def run(self, steps: int | None = None) -> list[StepMetrics]:
        steps = self.s.steps if steps is None else steps
        return [self.train_step() for _ in range(steps)]
