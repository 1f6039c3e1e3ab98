"""Two-tier arena memory system with an asynchronous transfer engine.

The Fast tier stands in for capacity-limited on-package memory and the Slow
tier for conventional DRAM. Both live in ordinary host memory: Fast is
distinguished by its capacity bound, its huge-page-analog alignment, and an
optional transfer throttle. Allocations carry logical offsets in the arena's
address space (alignment and capacity accounting are exact) while the bytes
themselves live in per-allocation numpy buffers.

Transfers run on two dedicated worker threads, one per direction (load =
into Fast, offload = out of Fast), each draining a FIFO queue. A throttled
engine sleeps bytes/rate per request so that overlap between transfers and
compute is observable in the trace.
"""

from __future__ import annotations

import queue
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import OutOfTierError
from .trace import Trace

KiB = 1024
MiB = 1024 * 1024
GiB = 1024 * 1024 * 1024

#: Bandwidth factors relative to the local base rate for remote-access presets.
THROTTLE_PRESETS = {
    "off": None,
    "same_die_remote": 0.5,
    "cross_die": 0.37,
    "cross_cpu": 0.10,
}


class MemTier(Enum):
    FAST = "fast"
    SLOW = "slow"


@dataclass
class MemConfig:
    """Simulated-hierarchy parameters. Config keys mirror the runtime knobs."""

    fast_capacity_bytes: int = 512 * MiB
    slow_capacity_bytes: int = 64 * GiB
    alignment_bytes: int = 2 * MiB
    throttle_preset: str = "off"
    # Base local rate the preset factors scale; only meaningful when a preset
    # other than "off" is selected. There is no hardware-derived default.
    throttle_base_bytes_per_sec: float = 256.0 * MiB

    def validate(self) -> None:
        if self.alignment_bytes <= 0 or self.alignment_bytes & (self.alignment_bytes - 1):
            raise ValueError(f"alignment_bytes must be a power of two, got {self.alignment_bytes}")
        if self.alignment_bytes < 8:
            raise ValueError("alignment_bytes must be at least 8 to keep dtype views aligned")
        if self.throttle_preset not in THROTTLE_PRESETS:
            raise ValueError(f"unknown throttle preset {self.throttle_preset!r}")
        if self.fast_capacity_bytes <= 0 or self.slow_capacity_bytes <= 0:
            raise ValueError("tier capacities must be positive")

    def throttle_rate(self) -> float | None:
        factor = THROTTLE_PRESETS[self.throttle_preset]
        if factor is None:
            return None
        return self.throttle_base_bytes_per_sec * factor


class Allocation:
    """A live block inside one arena. Never migrates between arenas."""

    __slots__ = ("id", "arena", "offset", "nbytes", "rounded", "buf", "live", "label")

    def __init__(self, alloc_id: int, arena: "Arena", offset: int, nbytes: int,
                 rounded: int, label: str):
        self.id = alloc_id
        self.arena = arena
        self.offset = offset
        self.nbytes = nbytes
        self.rounded = rounded
        self.buf = np.zeros(nbytes, dtype=np.uint8)
        self.live = True
        self.label = label

    @property
    def tier(self) -> MemTier:
        return self.arena.tier

    def free(self) -> None:
        self.arena.free(self)

    def __repr__(self) -> str:
        return f"Allocation({self.label!r}, {self.arena.tier.value}, {self.nbytes}B@{self.offset})"


class Arena:
    """Capacity-bounded tier with a first-fit free list over logical offsets.

    All offsets and block sizes are multiples of the alignment, so every
    allocation start address satisfies the huge-page-analog alignment rule.
    Exceeding capacity raises OutOfTierError; there is no implicit spill.
    """

    def __init__(self, tier: MemTier, capacity_bytes: int, alignment_bytes: int):
        self.tier = tier
        self.capacity_bytes = capacity_bytes
        self.alignment_bytes = alignment_bytes
        self.used_bytes = 0
        self.peak_bytes = 0
        self._free: list[tuple[int, int]] = [(0, capacity_bytes)]  # (offset, size), sorted
        self._live: dict[int, Allocation] = {}
        self._next_id = 0
        self._lock = threading.Lock()

    def _round(self, nbytes: int) -> int:
        a = self.alignment_bytes
        return (nbytes + a - 1) // a * a

    def alloc(self, nbytes: int, label: str = "") -> Allocation:
        if nbytes <= 0:
            raise ValueError(f"allocation size must be positive, got {nbytes}")
        rounded = self._round(nbytes)
        with self._lock:
            for i, (off, size) in enumerate(self._free):
                if size >= rounded:
                    if size == rounded:
                        self._free.pop(i)
                    else:
                        self._free[i] = (off + rounded, size - rounded)
                    self._next_id += 1
                    a = Allocation(self._next_id, self, off, nbytes, rounded, label)
                    self._live[a.id] = a
                    self.used_bytes += rounded
                    if self.used_bytes > self.peak_bytes:
                        self.peak_bytes = self.used_bytes
                    return a
            # build the report inline: snapshot() would retake the held lock
            report = {"tier": self.tier.value, "capacity_bytes": self.capacity_bytes,
                      "used_bytes": self.used_bytes, "peak_bytes": self.peak_bytes,
                      "live_allocations": len(self._live), "requested": nbytes}
            raise OutOfTierError(
                f"{self.tier.value} arena cannot fit {nbytes} bytes "
                f"(rounded {rounded}, used {self.used_bytes}/{self.capacity_bytes})",
                report=report,
            )

    def free(self, alloc: Allocation) -> None:
        with self._lock:
            if alloc.id not in self._live:
                raise ValueError(f"free of unknown allocation id {alloc.id}")
            del self._live[alloc.id]
            alloc.live = False
            self.used_bytes -= alloc.rounded
            self._insert_free(alloc.offset, alloc.rounded)

    def free_if_live(self, alloc: Allocation) -> None:
        """Finalizer-friendly free: ignores already-freed blocks."""
        with self._lock:
            if alloc.id not in self._live:
                return
            del self._live[alloc.id]
            alloc.live = False
            self.used_bytes -= alloc.rounded
            self._insert_free(alloc.offset, alloc.rounded)

    def _insert_free(self, off: int, size: int) -> None:
        # Keep the free list sorted and coalesced.
        free = self._free
        lo, hi = 0, len(free)
        while lo < hi:
            mid = (lo + hi) // 2
            if free[mid][0] < off:
                lo = mid + 1
            else:
                hi = mid
        free.insert(lo, (off, size))
        if lo + 1 < len(free) and free[lo][0] + free[lo][1] == free[lo + 1][0]:
            free[lo] = (free[lo][0], free[lo][1] + free[lo + 1][1])
            free.pop(lo + 1)
        if lo > 0 and free[lo - 1][0] + free[lo - 1][1] == free[lo][0]:
            free[lo - 1] = (free[lo - 1][0], free[lo - 1][1] + free[lo][1])
            free.pop(lo)

    def live_allocations(self) -> list[Allocation]:
        with self._lock:
            return list(self._live.values())

    def check_conservation(self) -> None:
        with self._lock:
            total = sum(a.rounded for a in self._live.values())
            if total != self.used_bytes:
                raise AssertionError(
                    f"{self.tier.value} arena accounting drift: "
                    f"live={total} used={self.used_bytes}"
                )
            free_total = sum(s for _, s in self._free)
            if free_total + self.used_bytes != self.capacity_bytes:
                raise AssertionError(
                    f"{self.tier.value} arena free-list drift: "
                    f"free={free_total} used={self.used_bytes} cap={self.capacity_bytes}"
                )

    def reset_peak(self) -> None:
        with self._lock:
            self.peak_bytes = self.used_bytes

    def snapshot(self) -> dict:
        with self._lock:
            return {
                "tier": self.tier.value,
                "capacity_bytes": self.capacity_bytes,
                "used_bytes": self.used_bytes,
                "peak_bytes": self.peak_bytes,
                "live_allocations": len(self._live),
            }


class TransferState(Enum):
    QUEUED = "queued"
    IN_FLIGHT = "in_flight"
    DONE = "done"


class TransferRequest:
    """Completion token for one asynchronous copy between allocations."""

    __slots__ = ("src", "dst", "nbytes", "label", "_state", "_event", "simulated_seconds",
                 "_lock")

    def __init__(self, src: Allocation, dst: Allocation, nbytes: int, label: str):
        self.src = src
        self.dst = dst
        self.nbytes = nbytes
        self.label = label
        self._state = TransferState.QUEUED
        self._event = threading.Event()
        self._lock = threading.Lock()
        self.simulated_seconds = 0.0

    @property
    def state(self) -> TransferState:
        return self._state

    def _set_state(self, state: TransferState) -> None:
        with self._lock:
            # Queued -> InFlight -> Done, monotone.
            order = [TransferState.QUEUED, TransferState.IN_FLIGHT, TransferState.DONE]
            if order.index(state) < order.index(self._state):
                raise AssertionError(f"transfer state regression {self._state} -> {state}")
            self._state = state
        if state is TransferState.DONE:
            self._event.set()

    def wait(self, timeout: float | None = None) -> None:
        if not self._event.wait(timeout=timeout):
            raise TimeoutError(f"transfer {self.label!r} did not complete in {timeout}s")

    def done(self) -> bool:
        return self._state is TransferState.DONE


class TransferEngine:
    """Two dedicated transfer workers, one per direction (load / offload)."""

    _SLEEP_CHUNK = 0.005

    def __init__(self, trace: Trace | None = None, rate_bytes_per_sec: float | None = None):
        self.trace = trace or Trace(enabled=False)
        self.rate = rate_bytes_per_sec
        self.bytes_moved = 0
        self._queues = {
            "load": queue.SimpleQueue(),
            "offload": queue.SimpleQueue(),
        }
        self._shutdown = False
        self._workers = []
        for stream in ("load", "offload"):
            w = threading.Thread(
                target=self._worker, args=(stream,), name=f"transfer-{stream}", daemon=True
            )
            w.start()
            self._workers.append(w)

    def submit(self, src: Allocation, dst: Allocation, nbytes: int | None = None,
               label: str = "") -> TransferRequest:
        if self._shutdown:
            raise RuntimeError("transfer engine is shut down")
        if src is dst:
            raise ValueError("transfer src and dst must differ")
        n = min(src.nbytes, dst.nbytes) if nbytes is None else nbytes
        if n > src.nbytes or n > dst.nbytes:
            raise ValueError(
                f"transfer of {n} bytes exceeds src ({src.nbytes}) or dst ({dst.nbytes})"
            )
        req = TransferRequest(src, dst, n, label or src.label)
        stream = "load" if dst.tier is MemTier.FAST else "offload"
        self.trace.record(stream, "issue", req.label, n)
        self._queues[stream].put(req)
        return req

    def _worker(self, stream: str) -> None:
        q = self._queues[stream]
        while True:
            req = q.get()
            if req is None:
                return
            req._set_state(TransferState.IN_FLIGHT)
            self.trace.record(stream, "begin", req.label, req.nbytes)
            np.copyto(req.dst.buf[: req.nbytes], req.src.buf[: req.nbytes])
            if self.rate:
                req.simulated_seconds = req.nbytes / self.rate
                deadline = time.perf_counter() + req.simulated_seconds
                while not self._shutdown:
                    remaining = deadline - time.perf_counter()
                    if remaining <= 0:
                        break
                    time.sleep(min(self._SLEEP_CHUNK, remaining))
            self.bytes_moved += req.nbytes
            self.trace.record(stream, "end", req.label, req.nbytes)
            req._set_state(TransferState.DONE)

    def close(self) -> None:
        if self._shutdown:
            return
        self._shutdown = True
        for q in self._queues.values():
            q.put(None)
        for w in self._workers:
            w.join(timeout=5.0)


class PinnedPool:
    """Slow-tier blocks reused across a training run, never returned early.

    Blocks are uniform (block_size_bytes) and acquired lazily from the parent
    Slow arena; release() only recycles them through the pool's own free list.
    """

    def __init__(self, slow_arena: Arena, block_size_bytes: int):
        if block_size_bytes <= 0:
            raise ValueError("pinned pool block size must be positive")
        self.arena = slow_arena
        self.block_size_bytes = block_size_bytes
        self._free: list[Allocation] = []
        self._all: list[Allocation] = []
        self._lock = threading.Lock()

    def acquire(self, label: str = "pinned") -> Allocation:
        with self._lock:
            if self._free:
                blk = self._free.pop()
                blk.label = label
                return blk
        blk = self.arena.alloc(self.block_size_bytes, label=label)
        with self._lock:
            self._all.append(blk)
        return blk

    def release(self, block: Allocation) -> None:
        with self._lock:
            if block not in self._all:
                raise ValueError("release of a block the pool does not own")
            self._free.append(block)

    @property
    def block_count(self) -> int:
        return len(self._all)

    @property
    def free_count(self) -> int:
        return len(self._free)

    def close(self) -> None:
        with self._lock:
            for blk in self._all:
                self.arena.free_if_live(blk)
            self._all.clear()
            self._free.clear()


class _TierMode(threading.local):
    def __init__(self):
        self.stack: list[MemTier] = []


class MemorySystem:
    """One Fast arena, one Slow arena, a transfer engine, and the step trace."""

    def __init__(self, config: MemConfig | None = None, trace: bool = True):
        self.config = config or MemConfig()
        self.config.validate()
        self.trace = Trace(enabled=trace)
        self.fast = Arena(MemTier.FAST, self.config.fast_capacity_bytes,
                          self.config.alignment_bytes)
        self.slow = Arena(MemTier.SLOW, self.config.slow_capacity_bytes,
                          self.config.alignment_bytes)
        self.engine = TransferEngine(trace=self.trace,
                                     rate_bytes_per_sec=self.config.throttle_rate())
        self._mode = _TierMode()
        self._default_tier = MemTier.SLOW
        # optional callback: return True after freeing Fast bytes (e.g. by
        # settling pending offloads) so a failed Fast allocation can retry
        self.pressure_handler = None

    def arena(self, tier: MemTier) -> Arena:
        return self.fast if tier is MemTier.FAST else self.slow

    # -- default-tier mode (per execution flow) -----------------------------

    @property
    def default_tier(self) -> MemTier:
        if self._mode.stack:
            return self._mode.stack[-1]
        return self._default_tier

    def set_default_tier(self, tier: MemTier) -> MemTier:
        """Switch the calling flow's allocation tier; returns the previous one."""
        prev = self.default_tier
        self._mode.stack.append(tier)
        return prev

    def restore_default_tier(self) -> None:
        if self._mode.stack:
            self._mode.stack.pop()

    def set_base_tier(self, tier: MemTier) -> MemTier:
        """Process-wide fallback tier used when no scoped mode is active."""
        prev = self._default_tier
        self._default_tier = tier
        return prev

    @contextmanager
    def tier_mode(self, tier: MemTier):
        self.set_default_tier(tier)
        try:
            yield
        finally:
            self.restore_default_tier()

    # -- allocation / transfer ----------------------------------------------

    def alloc(self, nbytes: int, tier: MemTier | None = None, label: str = "") -> Allocation:
        arena = self.arena(tier or self.default_tier)
        if arena.tier is not MemTier.FAST or self.pressure_handler is None:
            return arena.alloc(nbytes, label=label)
        while True:
            try:
                return arena.alloc(nbytes, label=label)
            except OutOfTierError:
                if not self.pressure_handler():
                    raise

    def transfer_async(self, src: Allocation, dst: Allocation,
                       label: str = "") -> TransferRequest:
        return self.engine.submit(src, dst, label=label)

    def transfer_wait(self, req: TransferRequest, timeout: float | None = 120.0) -> None:
        req.wait(timeout=timeout)

    def capacity_snapshot(self) -> dict:
        return {"fast": self.fast.snapshot(), "slow": self.slow.snapshot(),
                "transfer_bytes": self.engine.bytes_moved}

    def close(self) -> None:
        self.engine.close()


_current: MemorySystem | None = None
_current_lock = threading.Lock()


def current_system() -> MemorySystem:
    """The ambient memory system; created lazily with library defaults."""
    global _current
    with _current_lock:
        if _current is None:
            _current = MemorySystem(MemConfig(), trace=False)
        return _current


def set_current_system(system: MemorySystem | None) -> MemorySystem | None:
    global _current
    with _current_lock:
        prev = _current
        _current = system
        return prev


@contextmanager
def use_system(system: MemorySystem):
    prev = set_current_system(system)
    try:
        yield system
    finally:
        set_current_system(prev)
