"""Blocked GEMM with a two-level partitioning and an 8x8 register tile.

Structure: the output columns are split across cluster worker groups (outer
level, no inter-group data exchange), each group's slice is covered by
mc x nc cache blocks subdivided into an m_inner x n_inner subtask grid, and
panels are packed into Fast-tier buffers before an 8x8-tile accumulation
walks the k dimension.

Accumulation-order contract: every output element equals the left-to-right
ordered sum over k (within each kc block, then across kc blocks ascending).
Each element's float sequence is therefore independent of the M/N tiling,
the cluster split, and the thread assignment — cluster counts 1/2/4 produce
bitwise-identical results, and so do different kc choices. The vectorized
per-k rank-1 update below is bit-equal to running the 8x8 microkernel tile
by tile.
"""

from __future__ import annotations

import queue
import threading
import warnings
from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .memory import MiB, MemorySystem, MemTier, current_system
from .workers import register_worker


def _pad8(n: int) -> int:
    return (n + 7) // 8 * 8


@dataclass
class TileConfig:
    """Full parameterization of the two-level GEMM partitioning."""

    clusters: int = 1
    kc: int = 256
    mc: int = 64
    nc: int = 256
    mr: int = 8
    nr: int = 8
    m_inner: int = 0  # 0 = derive from the L2 model
    n_inner: int = 0  # 0 = derive from threads_per_cluster
    buffering_depth: int = 2
    threads_per_cluster: int = 1
    l2_model_bytes: int = 1 * MiB

    def validate(self) -> None:
        if self.mr != 8 or self.nr != 8:
            raise ValueError("register tile is fixed at 8x8")
        if self.mc <= 0 or self.mc % self.mr:
            raise ValueError(f"mc must be a positive multiple of {self.mr}, got {self.mc}")
        if self.nc <= 0 or self.nc % self.nr:
            raise ValueError(f"nc must be a positive multiple of {self.nr}, got {self.nc}")
        if self.kc <= 0:
            raise ValueError(f"kc must be positive, got {self.kc}")
        if self.clusters < 1:
            raise ValueError(f"clusters must be >= 1, got {self.clusters}")
        if self.buffering_depth not in (1, 2, 3):
            raise ValueError(f"buffering_depth must be 1, 2 or 3, got {self.buffering_depth}")
        if self.threads_per_cluster < 1:
            raise ValueError("threads_per_cluster must be >= 1")
        if self.m_inner < 0 or self.n_inner < 0:
            raise ValueError("inner grid counts must be >= 0 (0 = derived)")

    def resolved_inner(self) -> tuple[int, int]:
        """Effective inner subtask grid (m_inner, n_inner).

        Default rule: m_inner is the smallest count keeping one A-subpanel
        within half the modeled L2; n_inner tops the grid up to one subtask
        per thread.
        """
        mi = self.m_inner
        if mi == 0:
            panel_bytes = self.mc * self.kc * 8  # worst-case F64
            budget = max(1, self.l2_model_bytes // 2)
            mi = max(1, -(-panel_bytes // budget))
            mi = min(mi, max(1, self.mc // self.mr))
        ni = self.n_inner
        if ni == 0:
            ni = max(1, -(-self.threads_per_cluster // mi))
        return mi, ni

    def to_kv(self) -> str:
        lines = [f"{f.name}={getattr(self, f.name)}" for f in fields(self)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_kv(cls, text: str) -> "TileConfig":
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
            key, val = line.split("=", 1)
            key = key.strip()
            if key not in known:
                raise ValueError(f"line {lineno}: unknown key {key!r}")
            kwargs[key] = int(val.strip())
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg


DEFAULT_TILE = TileConfig()


class PackBuffer:
    """A packed panel in the Fast arena, k-major so each k row is contiguous.

    A-panels store the mc x kc source transposed to (kc, mc_padded); B-panels
    store (kc, nc_padded). Columns beyond the source extent are zero so edge
    tiles need no scalar cleanup. 8-wide strips (the microkernel operands)
    are read as ``panel_view(i)``.
    """

    def __init__(self, kind: str, kc: int, width: int, dtype: np.dtype,
                 system: MemorySystem):
        if kind not in ("a", "b"):
            raise ValueError("pack buffer kind must be 'a' or 'b'")
        self.kind = kind
        self.kc = kc
        self.width = _pad8(width)
        self.alloc = system.alloc(kc * self.width * dtype.itemsize,
                                  tier=MemTier.FAST, label=f"pack_{kind}")
        self.array = self.alloc.buf.view(dtype).reshape(kc, self.width)
        self.k_valid = 0
        self.valid = 0

    def pack(self, panel: np.ndarray) -> "PackBuffer":
        if self.kind == "a":
            m, k = panel.shape
            if k > self.kc or m > self.width:
                raise ValueError("panel exceeds pack buffer extents")
            self.array[:k, :m] = panel.T
            self.array[:k, m:] = 0
            self.k_valid, self.valid = k, m
        else:
            k, n = panel.shape
            if k > self.kc or n > self.width:
                raise ValueError("panel exceeds pack buffer extents")
            self.array[:k, :n] = panel
            self.array[:k, n:] = 0
            self.k_valid, self.valid = k, n
        return self

    def unpack(self) -> np.ndarray:
        if self.kind == "a":
            return np.array(self.array[: self.k_valid, : self.valid].T, copy=True)
        return np.array(self.array[: self.k_valid, : self.valid], copy=True)

    def panel_view(self, idx: int) -> np.ndarray:
        """8-wide strip idx in column-panel order, shape (k_valid, 8)."""
        return self.array[: self.k_valid, idx * 8: (idx + 1) * 8]

    def free(self) -> None:
        self.alloc.arena.free_if_live(self.alloc)


def pack_a(panel, system: MemorySystem | None = None) -> PackBuffer:
    """Pack an mc x kc A-panel view into a Fast-tier buffer."""
    arr = panel.data if isinstance(panel, T.Tensor) else np.asarray(panel)
    ms = system or current_system()
    buf = PackBuffer("a", arr.shape[1], arr.shape[0], arr.dtype, ms)
    return buf.pack(arr)


def pack_b(panel, system: MemorySystem | None = None) -> PackBuffer:
    """Pack a kc x nc B-panel view into a Fast-tier buffer."""
    arr = panel.data if isinstance(panel, T.Tensor) else np.asarray(panel)
    ms = system or current_system()
    buf = PackBuffer("b", arr.shape[0], arr.shape[1], arr.dtype, ms)
    return buf.pack(arr)


def microkernel_8x8(a_panel: np.ndarray, b_panel: np.ndarray, kc: int,
                    c_tile: np.ndarray) -> None:
    """c_tile += sum_k a[:, k] outer b[k, :], k ascending (one rounding per op)."""
    if c_tile.shape != (8, 8):
        raise ValueError("c_tile must be 8x8")
    tmp = np.empty((8, 8), dtype=c_tile.dtype)
    for k in range(kc):
        np.multiply(a_panel[k, :, None], b_panel[k, None, :], out=tmp)
        np.add(c_tile, tmp, out=c_tile)


# -- execution ------------------------------------------------------------------


def _split_even(total: int, parts: int) -> list[tuple[int, int]]:
    base, rem = divmod(total, parts)
    out = []
    start = 0
    for i in range(parts):
        size = base + (1 if i < rem else 0)
        out.append((start, start + size))
        start += size
    return out


class _Workspace:
    """Per-worker pack buffers and accumulator tiles, all Fast-tier."""

    def __init__(self, kc: int, m_max: int, n_max: int, depth: int,
                 dtype: np.dtype, system: MemorySystem):
        self.depth = depth
        self.a_bufs = [PackBuffer("a", kc, m_max, dtype, system) for _ in range(depth)]
        self.b_bufs = [PackBuffer("b", kc, n_max, dtype, system) for _ in range(depth)]
        mp, npad = _pad8(m_max), _pad8(n_max)
        self._acc_alloc = system.alloc(mp * npad * dtype.itemsize,
                                       tier=MemTier.FAST, label="gemm_acc")
        self._tmp_alloc = system.alloc(mp * npad * dtype.itemsize,
                                       tier=MemTier.FAST, label="gemm_tmp")
        self.acc = self._acc_alloc.buf.view(dtype).reshape(mp, npad)
        self.tmp = self._tmp_alloc.buf.view(dtype).reshape(mp, npad)

    def free(self) -> None:
        for b in self.a_bufs + self.b_bufs:
            b.free()
        self._acc_alloc.arena.free_if_live(self._acc_alloc)
        self._tmp_alloc.arena.free_if_live(self._tmp_alloc)


def _run_task(A: np.ndarray, B: np.ndarray, C: np.ndarray, alpha: float, beta: float,
              r0: int, r1: int, c0: int, c1: int, kc: int, ws: _Workspace) -> None:
    m, n = r1 - r0, c1 - c0
    mp, npad = _pad8(m), _pad8(n)
    K = A.shape[1]
    acc = ws.acc[:mp, :npad]
    tmp = ws.tmp[:mp, :npad]
    acc.fill(0)
    for kbi, kb in enumerate(range(0, max(K, 1), kc)):
        if kb >= K:
            break
        kw = min(kc, K - kb)
        abuf = ws.a_bufs[kbi % ws.depth]
        bbuf = ws.b_bufs[kbi % ws.depth]
        abuf.pack(A[r0:r1, kb: kb + kw])
        bbuf.pack(B[kb: kb + kw, c0:c1])
        a_rows = list(abuf.array[:kw, :mp, None])
        b_rows = list(bbuf.array[:kw, None, :npad])
        mul, addf = np.multiply, np.add
        for ak, bk in zip(a_rows, b_rows):
            mul(ak, bk, out=tmp)
            addf(acc, tmp, out=acc)
    out = C[r0:r1, c0:c1]
    res = acc[:m, :n]
    dt = C.dtype.type
    if beta == 0.0:
        if alpha == 1.0:
            np.copyto(out, res)
        else:
            np.multiply(res, dt(alpha), out=out)
    else:
        scaled = tmp[:m, :n]
        if alpha == 1.0:
            np.copyto(scaled, res)
        else:
            np.multiply(res, dt(alpha), out=scaled)
        if beta != 1.0:
            np.multiply(out, dt(beta), out=out)
        np.add(scaled, out, out=out)


class _ClusterPool:
    """Persistent worker threads, one group per cluster."""

    def __init__(self, clusters: int, threads_per_cluster: int):
        self.queues: list[queue.SimpleQueue] = []
        self.threads: list[threading.Thread] = []
        for cid in range(clusters):
            for tid in range(threads_per_cluster):
                q: queue.SimpleQueue = queue.SimpleQueue()
                t = threading.Thread(target=self._loop, args=(q,),
                                     name=f"gemm-c{cid}t{tid}", daemon=True)
                t.start()
                self.queues.append(q)
                self.threads.append(t)

    @staticmethod
    def _loop(q: queue.SimpleQueue) -> None:
        register_worker("compute")
        while True:
            item = q.get()
            if item is None:
                return
            tasks, done, errbox = item
            try:
                for fn in tasks:
                    fn()
            except BaseException as exc:  # propagate to the issuing thread
                errbox.append(exc)
            finally:
                done.set()

    def run(self, per_worker: list[list]) -> None:
        events = []
        errbox: list[BaseException] = []
        for q, tasks in zip(self.queues, per_worker):
            if not tasks:
                continue
            done = threading.Event()
            q.put((tasks, done, errbox))
            events.append(done)
        for ev in events:
            ev.wait()
        if errbox:
            raise errbox[0]

    def close(self) -> None:
        for q in self.queues:
            q.put(None)


_pools: dict[tuple[int, int], _ClusterPool] = {}
_pools_lock = threading.Lock()


def _get_pool(clusters: int, tpc: int) -> _ClusterPool:
    with _pools_lock:
        key = (clusters, tpc)
        if key not in _pools:
            _pools[key] = _ClusterPool(clusters, tpc)
        return _pools[key]


def _as_array(x) -> np.ndarray:
    if isinstance(x, T.Tensor):
        x.check_readable()
        return x.data
    return np.asarray(x)


def gemm(a, b, c, alpha: float = 1.0, beta: float = 0.0,
         cfg: TileConfig | None = None, system: MemorySystem | None = None) -> None:
    """C <- alpha * A @ B + beta * C, computed per the tiling contract above."""
    cfg = cfg or DEFAULT_TILE
    cfg.validate()
    A, B, C = _as_array(a), _as_array(b), _as_array(c)
    if A.ndim != 2 or B.ndim != 2 or C.ndim != 2:
        raise ValueError("gemm operands must be rank 2")
    M, K = A.shape
    K2, N = B.shape
    if K != K2 or C.shape != (M, N):
        raise ValueError(f"gemm shape mismatch: {A.shape} @ {B.shape} -> {C.shape}")
    if not (A.dtype == B.dtype == C.dtype):
        raise ValueError("gemm operands must share a dtype")
    ms = system or current_system()

    clusters = cfg.clusters
    if N < clusters:
        warnings.warn(f"gemm N={N} smaller than {clusters} clusters; degrading")
        clusters = max(1, N)
    m_inner, n_inner = cfg.resolved_inner()

    # Enumerate subtile tasks per worker; assignments depend only on shapes + cfg.
    groups = _split_even(N, clusters)
    nworkers = clusters * cfg.threads_per_cluster
    per_worker_ranges: list[list[tuple[int, int, int, int]]] = [[] for _ in range(nworkers)]
    m_max = n_max = 0
    for cid, (g0, g1) in enumerate(groups):
        counter = 0
        for nb0 in range(g0, g1, cfg.nc):
            nb1 = min(nb0 + cfg.nc, g1)
            for mb0 in range(0, M, cfg.mc):
                mb1 = min(mb0 + cfg.mc, M)
                for mi0, mi1 in _split_even(mb1 - mb0, min(m_inner, mb1 - mb0)):
                    for ni0, ni1 in _split_even(nb1 - nb0, min(n_inner, nb1 - nb0)):
                        if mi1 == mi0 or ni1 == ni0:
                            continue
                        r0, r1 = mb0 + mi0, mb0 + mi1
                        c0, c1 = nb0 + ni0, nb0 + ni1
                        wid = cid * cfg.threads_per_cluster + counter % cfg.threads_per_cluster
                        per_worker_ranges[wid].append((r0, r1, c0, c1))
                        m_max = max(m_max, r1 - r0)
                        n_max = max(n_max, c1 - c0)
                        counter += 1

    active = [i for i, t in enumerate(per_worker_ranges) if t]
    kc_eff = min(cfg.kc, max(K, 1))
    workspaces = {i: _Workspace(kc_eff, m_max, n_max, cfg.buffering_depth, A.dtype, ms)
                  for i in active}
    try:
        if len(active) == 1 or nworkers == 1:
            for i in active:
                ws = workspaces[i]
                for r0, r1, c0, c1 in per_worker_ranges[i]:
                    _run_task(A, B, C, alpha, beta, r0, r1, c0, c1, cfg.kc, ws)
        else:
            pool = _get_pool(clusters, cfg.threads_per_cluster)
            jobs: list[list] = [[] for _ in range(nworkers)]
            for i in active:
                ws = workspaces[i]
                def make(i=i, ws=ws):
                    def run():
                        for r0, r1, c0, c1 in per_worker_ranges[i]:
                            _run_task(A, B, C, alpha, beta, r0, r1, c0, c1, cfg.kc, ws)
                    return run
                jobs[i].append(make())
            pool.run(jobs)
    finally:
        for ws in workspaces.values():
            ws.free()


def gemm_bias(a, b, bias, c, cfg: TileConfig | None = None,
              system: MemorySystem | None = None) -> None:
    """C = A @ B + bias broadcast over rows (addmm)."""
    A, B, C = _as_array(a), _as_array(b), _as_array(c)
    v = _as_array(bias)
    if v.ndim != 1 or v.shape[0] != B.shape[1]:
        raise ValueError(f"bias length {v.shape} does not match N={B.shape[1]}")
    gemm(A, B, C, alpha=1.0, beta=0.0, cfg=cfg, system=system)
    np.add(C, v[None, :], out=C)


def matmul(a, b, cfg: TileConfig | None = None, system: MemorySystem | None = None,
           out: np.ndarray | None = None) -> np.ndarray:
    """Convenience wrapper: returns A @ B as a fresh ndarray."""
    A, B = _as_array(a), _as_array(b)
    C = out if out is not None else np.empty((A.shape[0], B.shape[1]), dtype=A.dtype)
    gemm(A, B, C, alpha=1.0, beta=0.0, cfg=cfg, system=system)
    return C


def mm_ordered(A: np.ndarray, B: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
    """Lean single-threaded matmul with the same ordered-sum semantics as gemm.

    Used by operator internals for small products; bit-equal to gemm with any
    tile configuration because the per-element k order is identical.
    """
    M, K = A.shape
    _, N = B.shape
    C = out if out is not None else np.empty((M, N), dtype=A.dtype)
    C.fill(0)
    tmp = np.empty((M, N), dtype=A.dtype)
    a_cols = np.ascontiguousarray(A.T)
    mul, addf = np.multiply, np.add
    for k in range(K):
        mul(a_cols[k, :, None], B[k, None, :], out=tmp)
        addf(C, tmp, out=C)
    return C


def gemm_naive(a, b):
    """Reference oracle: textbook i-k row accumulation, never parallel.

    Per-element floats follow the same ascending-k ordered sum as a scalar
    ijk triple loop (each product rounded once, each add rounded once).
    """
    A, B = _as_array(a), _as_array(b)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[0]:
        raise ValueError(f"gemm_naive shape mismatch: {A.shape} @ {B.shape}")
    M, K = A.shape
    N = B.shape[1]
    C = np.zeros((M, N), dtype=A.dtype)
    for i in range(M):
        ci = C[i]
        ai = A[i]
        for k in range(K):
            ci += ai[k] * B[k]
    if isinstance(a, T.Tensor):
        return T.from_numpy(C, dtype=a.dtype)
    return C
