"""Hook-driven residency scheduler around the module chain.

A warm-up forward records module order, seeds the pinned Slow-tier pool, and
counts each activation's forward consumers. During training every wrapped
module runs between four hooks:

  pre_forward   barrier on inputs + weights, async prefetch of the next
                module's weights, grad hooks registered, default tier -> Fast
  post_forward  offload this module's weights, consumed inputs, and saved
                activations to their preassigned pinned slots; tier -> Slow
  pre_backward  barrier on the incoming gradient, inputs, weights, and saved
                activations; async prefetch of the previous module's set
  post_backward weights offloaded again; dead activations and gradients freed
                at reference-count zero

Weight-gradient offloads are issued from per-parameter gradient hooks; for
parameters pending a collective reduction the offload blocks on the compute
flow so the reducer always sees settled bytes. Placement never changes
values: a wrapped run is bitwise identical to an unwrapped one.
"""

from __future__ import annotations

import threading
import weakref
from dataclasses import dataclass, field

from . import tensor as T
from .errors import OutOfTierError, PlanMismatchError
from .memory import Allocation, MemorySystem, MemTier, PinnedPool
from .model import Module


@dataclass
class AutoMemPlan:
    """Execution order, residency census, and activation reference counts."""

    order: list[str] = field(default_factory=list)
    refcounts: dict[tuple, int] = field(default_factory=dict)
    pool_block_bytes: int = 0
    census_slots: int = 0
    warmup_offload_bytes: int = 0


class _Tracked:
    __slots__ = ("tensor", "key", "slot", "pending", "pending_kind", "clean_slot")

    def __init__(self, tensor: T.Tensor, key: tuple):
        self.tensor = tensor
        self.key = key
        self.slot: Allocation | None = None
        self.pending = None
        self.pending_kind = ""
        # True while the pinned slot holds the same bytes as the Fast copy,
        # making the Fast copy droppable without a transfer
        self.clean_slot = False


class AutoMemModule:
    """Observationally transparent wrapper installing the residency hooks."""

    def __init__(self, engine: "AutoMemEngine", inner: Module):
        if isinstance(inner, AutoMemModule):
            raise ValueError(f"module {inner.name!r} is already wrapped")
        self.engine = engine
        self.inner = inner
        self.name = inner.name
        self.ctx = inner.ctx

    @property
    def params(self) -> list[T.Tensor]:
        return self.inner.params

    def ctx_tensors(self) -> list[T.Tensor]:
        return self.inner.ctx_tensors()

    def clear_ctx(self) -> None:
        self.inner.clear_ctx()

    def set_step_inputs(self, *args, **kwargs):
        return self.inner.set_step_inputs(*args, **kwargs)

    def forward(self, inputs: tuple) -> tuple:
        eng = self.engine
        if eng.recording:
            return eng._record_forward(self, inputs)
        eng.pre_forward(self, inputs)
        eng.trace.record("compute", "begin", f"{self.name}.fwd")
        try:
            outputs = self.inner.forward(inputs)
        finally:
            eng.trace.record("compute", "end", f"{self.name}.fwd")
        eng.post_forward(self, inputs, outputs)
        return outputs

    def backward(self, grad_outputs: tuple) -> tuple:
        eng = self.engine
        eng.pre_backward(self, grad_outputs)
        eng.trace.record("compute", "begin", f"{self.name}.bwd")
        try:
            grads_in = self.inner.backward(grad_outputs)
        finally:
            eng.trace.record("compute", "end", f"{self.name}.bwd")
        eng.post_backward(self, grad_outputs, grads_in)
        return grads_in


class AutoMemEngine:
    """Owns the plan, the pinned pool, and all tensor residency transitions."""

    def __init__(self, system: MemorySystem, modules: list[Module],
                 prefetch_lookahead: int = 1):
        self.system = system
        self.trace = system.trace
        self.prefetch_lookahead = prefetch_lookahead
        self.recording = False
        self.plan: AutoMemPlan | None = None
        self.pool: PinnedPool | None = None
        self.wrapped: list[AutoMemModule] = [self.wrap(m) for m in modules]
        self._by_name = {m.name: m for m in self.wrapped}
        self._tracked: dict[int, _Tracked] = {}
        self._slots_by_key: dict[tuple, Allocation] = {}
        self._fwd_counts: dict[int, int] = {}
        self._bwd_counts: dict[int, int] = {}
        self._orig_counts: dict[int, int] = {}
        self._module_state: dict[str, dict] = {}
        self._active_set: set[int] = set()
        self._cursor = 0
        self.grad_callback = None  # fn(param) once the gradient bytes are settled
        self.blocking_grad_params: set[int] = set()
        self._lock = threading.Lock()
        for m in self.wrapped:
            for p in m.params:
                self._track(p, ("param", p.name))
        system.pressure_handler = self._relieve_pressure

    # -- wrapping ------------------------------------------------------------

    def wrap(self, module: Module) -> AutoMemModule:
        return AutoMemModule(self, module)

    def index_of(self, name: str) -> int:
        return self.plan.order.index(name)

    # -- warm-up -------------------------------------------------------------

    def warmup(self, run_forward) -> AutoMemPlan:
        """Record execution order, activation references, and pool sizing."""
        if self.plan is not None:
            raise RuntimeError("warm-up already performed")
        self.recording = True
        self._rec_order: list[str] = []
        self._rec_produced: dict[int, tuple] = {}
        self._rec_counts: dict[tuple, int] = {}
        self._rec_sizes: list[int] = []
        try:
            run_forward()
        finally:
            self.recording = False
        plan = AutoMemPlan(order=list(self._rec_order))
        plan.refcounts = dict(self._rec_counts)
        align = self.system.config.alignment_bytes
        param_sizes = [p.nbytes for m in self.wrapped for p in m.params]
        sizes = self._rec_sizes + param_sizes + param_sizes  # grads mirror params
        rounded = [(s + align - 1) // align * align for s in sizes]
        plan.pool_block_bytes = max(rounded) if rounded else align
        plan.census_slots = len(rounded)
        plan.warmup_offload_bytes = sum(rounded)
        self.plan = plan
        self.pool = PinnedPool(self.system.slow, plan.pool_block_bytes)
        for m in self.wrapped:
            m.clear_ctx()
        return plan

    def _record_forward(self, module: AutoMemModule, inputs: tuple) -> tuple:
        self._rec_order.append(module.name)
        for t in inputs:
            if isinstance(t, T.Tensor) and t.id in self._rec_produced:
                key = self._rec_produced[t.id]
                self._rec_counts[key] = self._rec_counts.get(key, 0) + 1
        outputs = module.inner.forward(inputs)
        for j, t in enumerate(outputs):
            if isinstance(t, T.Tensor) and t.id not in self._rec_produced:
                key = (module.name, "out", j)
                self._rec_produced[t.id] = key
                self._rec_counts.setdefault(key, 0)
                self._rec_sizes.append(t.nbytes)
        for c in module.ctx_tensors():
            if c.id not in self._rec_produced:
                self._rec_sizes.append(c.nbytes)
        return outputs

    def record_step_inputs(self, inputs: tuple) -> None:
        """Register the chain's entry tensors (used in both warm-up and steps)."""
        if self.recording:
            for j, t in enumerate(inputs):
                if isinstance(t, T.Tensor):
                    key = ("input", j)
                    self._rec_produced[t.id] = key
                    self._rec_counts.setdefault(key, 0)
                    self._rec_sizes.append(t.nbytes)
            return
        if self.plan is None:
            raise RuntimeError("warm-up must run before training steps")
        self._cursor = 0
        for j, t in enumerate(inputs):
            if isinstance(t, T.Tensor):
                self._track(t, ("input", j))
                count = self.plan.refcounts.get(("input", j), 0)
                self._fwd_counts[t.id] = count
                self._orig_counts[t.id] = count

    # -- tracking / transfers --------------------------------------------------

    def _track(self, tensor: T.Tensor, key: tuple) -> _Tracked:
        tr = self._tracked.get(tensor.id)
        if tr is None:
            tr = _Tracked(tensor, key)
            tr.slot = self._slots_by_key.get(key)
            self._tracked[tensor.id] = tr
        return tr

    def _slot_for(self, tr: _Tracked) -> Allocation:
        if tr.slot is None:
            if tr.key in self._slots_by_key:
                tr.slot = self._slots_by_key[tr.key]
            else:
                tr.slot = self.pool.acquire(label=str(tr.tensor.name or tr.key))
                self._slots_by_key[tr.key] = tr.slot
        return tr.slot

    def _finalize(self, tr: _Tracked) -> None:
        req = tr.pending
        if req is None:
            return
        req.wait()
        t = tr.tensor
        if tr.pending_kind == "offload":
            old = t.alloc
            t.alloc = tr.slot
            t.data = tr.slot.buf[: t.nbytes].view(t.dtype.np).reshape(t.shape)
            old.arena.free_if_live(old)
            tr.clean_slot = False
        else:  # load
            fast_alloc = req.dst
            t.alloc = fast_alloc
            t.data = fast_alloc.buf.view(t.dtype.np).reshape(t.shape)
            weakref.finalize(t, fast_alloc.arena.free_if_live, fast_alloc)
            tr.clean_slot = True  # nothing mutates loaded tensors while Fast
        t.inflight = None
        tr.pending = None
        tr.pending_kind = ""

    def _reap(self) -> None:
        for tr in list(self._tracked.values()):
            if tr.pending is not None and tr.pending.done():
                self._finalize(tr)

    def _relieve_pressure(self) -> bool:
        """Free Fast bytes: settle a pending offload, or drop one clean load-
        staged copy whose pinned slot already holds identical bytes."""
        self._reap()
        for tr in self._tracked.values():
            if tr.pending is not None and tr.pending_kind == "offload":
                self._finalize(tr)
                return True
        for tr in self._tracked.values():
            t = tr.tensor
            if (tr.clean_slot and tr.pending is None and tr.slot is not None
                    and t.tier is MemTier.FAST and t.id not in self._active_set):
                old = t.alloc
                t.alloc = tr.slot
                t.data = tr.slot.buf[: t.nbytes].view(t.dtype.np).reshape(t.shape)
                old.arena.free_if_live(old)
                tr.clean_slot = False
                return True
        return False

    def _alloc_fast(self, nbytes: int, label: str) -> Allocation:
        try:
            return self.system.alloc(nbytes, tier=MemTier.FAST, label=label)
        except OutOfTierError:
            raise OutOfTierError(
                f"fast tier cannot hold working set ({nbytes} bytes for "
                f"{label!r} on top of {self.system.fast.used_bytes})",
                report=self.capacity_report())

    def _issue_offload(self, tensor: T.Tensor, blocking: bool = False) -> None:
        tr = self._track(tensor, ("anon", tensor.id))
        if tr.pending is not None or tensor.tier is MemTier.SLOW:
            return
        slot = self._slot_for(tr)
        if tensor.nbytes > slot.nbytes:
            raise OutOfTierError(
                f"tensor {tensor.name!r} ({tensor.nbytes} B) exceeds the pinned "
                f"pool block size ({slot.nbytes} B)", report=self.capacity_report())
        req = self.system.engine.submit(tensor.alloc, slot, nbytes=tensor.nbytes,
                                        label=tensor.name or str(tr.key))
        tensor.inflight = req
        tr.pending = req
        tr.pending_kind = "offload"
        if blocking:
            self._finalize(tr)

    def _issue_load(self, tensor: T.Tensor) -> None:
        tr = self._tracked.get(tensor.id)
        if tr is None or tensor.tier is MemTier.FAST:
            return
        if tr.pending is not None:
            return
        dst = self._alloc_fast(tensor.nbytes, label=tensor.name or str(tr.key))
        req = self.system.engine.submit(tensor.alloc, dst, nbytes=tensor.nbytes,
                                        label=tensor.name or str(tr.key))
        tensor.inflight = req
        tr.pending = req
        tr.pending_kind = "load"

    def _barrier(self, tensors) -> None:
        """Block until every tensor is Fast-resident and settled."""
        for t in tensors:
            if not isinstance(t, T.Tensor):
                continue
            tr = self._tracked.get(t.id)
            if tr is not None and tr.pending is not None:
                if tr.pending_kind == "load":
                    self._finalize(tr)
                    continue
                self._finalize(tr)  # settle the offload, then reload below
            if t.tier is MemTier.SLOW:
                tr = self._track(t, ("anon", t.id))
                self._issue_load(t)
                self._finalize(tr)

    # Prefetch never squeezes the working set: it stops once Fast occupancy
    # would cross this fraction of capacity. Loads it skips are re-issued by
    # the barrier when actually needed.
    PREFETCH_OCCUPANCY_LIMIT = 0.7

    def _prefetch(self, tensors) -> None:
        fast = self.system.fast
        budget = int(fast.capacity_bytes * self.PREFETCH_OCCUPANCY_LIMIT)
        align = fast.alignment_bytes
        for t in tensors:
            if not isinstance(t, T.Tensor):
                continue
            tr = self._tracked.get(t.id)
            if tr is not None and tr.pending is None and t.tier is MemTier.SLOW:
                rounded = (t.nbytes + align - 1) // align * align
                if fast.used_bytes + rounded > budget:
                    return
                try:
                    self._issue_load(t)
                except OutOfTierError:
                    return  # prefetch is best-effort; the barrier will retry

    def _free_tensor(self, tensor: T.Tensor) -> None:
        tr = self._tracked.pop(tensor.id, None)
        if tr is not None and tr.pending is not None:
            self._finalize(tr)
        tensor.free()

    # -- hooks -----------------------------------------------------------------

    def _backward_set(self, module: AutoMemModule) -> list[T.Tensor]:
        state = self._module_state.get(module.name, {})
        tensors = list(module.params)
        tensors.extend(t for t in state.get("inputs", ()) if isinstance(t, T.Tensor))
        tensors.extend(state.get("ctx", ()))
        return tensors

    def pre_forward(self, module: AutoMemModule, inputs: tuple) -> None:
        plan = self.plan
        if plan is None:
            raise RuntimeError("warm-up must run before training steps")
        if self._cursor >= len(plan.order) or plan.order[self._cursor] != module.name:
            expected = plan.order[self._cursor] if self._cursor < len(plan.order) else "<end>"
            raise PlanMismatchError(
                f"module {module.name!r} ran where plan expects {expected!r}")
        self._cursor += 1
        self._reap()
        for t in inputs:
            if isinstance(t, T.Tensor):
                self._track(t, ("anon", t.id))
        self._active_set = {t.id for t in inputs if isinstance(t, T.Tensor)}
        self._active_set.update(p.id for p in module.params)
        self._barrier(list(inputs) + list(module.params))
        idx = self.index_of(module.name)
        for ahead in range(1, self.prefetch_lookahead + 1):
            if idx + ahead < len(plan.order):
                nxt = self._by_name[plan.order[idx + ahead]]
                self._prefetch(nxt.params)
        for p in module.params:
            p.on_grad = self._on_grad
        self.system.set_default_tier(MemTier.FAST)

    def post_forward(self, module: AutoMemModule, inputs: tuple, outputs: tuple) -> None:
        self.system.restore_default_tier()
        plan = self.plan
        input_ids = {t.id for t in inputs if isinstance(t, T.Tensor)}
        out_ids = set()
        for j, t in enumerate(outputs):
            if isinstance(t, T.Tensor):
                out_ids.add(t.id)
                if t.id not in self._tracked:
                    self._track(t, (module.name, "out", j))
                    count = plan.refcounts.get((module.name, "out", j), 0)
                    self._fwd_counts[t.id] = count
                    self._orig_counts[t.id] = count
        seen = set(out_ids) | input_ids
        ctx_unique = []
        for j, t in enumerate(module.ctx_tensors()):
            if t.id in seen:
                continue
            seen.add(t.id)
            if t.id not in self._tracked:
                self._track(t, (module.name, "ctx", j))
            ctx_unique.append(t)
        self._module_state[module.name] = {"inputs": inputs, "ctx": ctx_unique}
        # consumed inputs: decrement forward reference counts, offload at zero
        for t in inputs:
            if isinstance(t, T.Tensor) and t.id in self._fwd_counts:
                self._fwd_counts[t.id] -= 1
                if self._fwd_counts[t.id] == 0 and t.id not in out_ids:
                    self._issue_offload(t)
        for t in ctx_unique:
            self._issue_offload(t)
        for p in module.params:
            self._issue_offload(p)
        self._reap()

    def pre_backward(self, module: AutoMemModule, grad_outputs: tuple) -> None:
        self._reap()
        need = self._backward_set(module)
        self._active_set = {t.id for t in grad_outputs if isinstance(t, T.Tensor)}
        self._active_set.update(t.id for t in need)
        self._barrier(list(grad_outputs))
        self._barrier(need)
        idx = self.index_of(module.name)
        if idx > 0:
            prev = self._by_name[self.plan.order[idx - 1]]
            self._prefetch(self._backward_set(prev))
        self.system.set_default_tier(MemTier.FAST)

    def post_backward(self, module: AutoMemModule, grad_outputs: tuple,
                      grads_in: tuple) -> None:
        self.system.restore_default_tier()
        for p in module.params:
            self._issue_offload(p)
            p.on_grad = None
        state = self._module_state.pop(module.name, {})
        for t in state.get("inputs", ()):
            if isinstance(t, T.Tensor):
                init = max(self._orig_counts.get(t.id, 1), 1)
                self._bwd_counts[t.id] = self._bwd_counts.get(t.id, init) - 1
                if self._bwd_counts[t.id] <= 0 and not t.requires_grad:
                    self._free_tensor(t)
        for t in state.get("ctx", ()):
            self._free_tensor(t)
        for t in grad_outputs:
            if isinstance(t, T.Tensor):
                self._free_tensor(t)
        module.clear_ctx()
        self._reap()

    def _on_grad(self, param: T.Tensor) -> None:
        g = param.grad
        self._track(g, ("param_grad", param.name))
        blocking = param.id in self.blocking_grad_params
        self._issue_offload(g, blocking=blocking)
        if self.grad_callback is not None:
            self.grad_callback(param)

    # -- step lifecycle ----------------------------------------------------------

    def begin_step(self, inputs: tuple) -> None:
        self._fwd_counts = {}
        self._bwd_counts = {}
        self._orig_counts = {}
        self.record_step_inputs(inputs)

    def finish_step(self) -> None:
        for tr in list(self._tracked.values()):
            if tr.pending is not None:
                self._finalize(tr)
        leftovers = {tid: c for tid, c in self._fwd_counts.items() if c != 0}
        negatives = {tid: c for tid, c in self._bwd_counts.items() if c < 0}
        if leftovers or negatives:
            raise AssertionError(
                f"activation reference counts did not settle: leftover={leftovers} "
                f"negative={negatives}")
        self._fwd_counts.clear()
        self._bwd_counts.clear()
        self._orig_counts.clear()
        self._module_state.clear()
        # drop trackers for dead step tensors; parameters and grads stay tracked
        self._tracked = {tid: tr for tid, tr in self._tracked.items()
                         if tr.key[0] in ("param", "param_grad")}

    def capacity_report(self) -> dict:
        rep = self.system.capacity_snapshot()
        rep["pinned_pool"] = {
            "block_bytes": self.pool.block_size_bytes if self.pool else 0,
            "blocks": self.pool.block_count if self.pool else 0,
            "free_blocks": self.pool.free_count if self.pool else 0,
        }
        rep["tracked_tensors"] = len(self._tracked)
        rep["in_flight"] = sum(1 for tr in self._tracked.values() if tr.pending)
        return rep
