"""Data-parallel collectives and communication-free cluster parallelism.

The communicator runs a ring all-reduce (R-1 reduce-scatter exchanges, then
R-1 all-gather exchanges) on a dedicated progress worker per rank, so compute
flows only issue and wait. Two transports share one wire format: in-process
queues for single-machine multi-rank tests, and length-prefixed frames over
stream sockets for multi-process runs.

Wire frame, little-endian:
    u32 magic 0x44484331 | u32 msg type (1 DATA, 2 BARRIER, 3 ERROR)
    u64 collective id | u64 chunk offset | u64 byte length | payload

CFTP runs tensor work split across in-process cluster groups with zero
messages; a transport-level message counter backs that assertion.
"""

from __future__ import annotations

import os
import queue
import socket
import struct
import threading
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import CollectiveError, TransportError
from .gemm import TileConfig, gemm, gemm_bias
from .workers import register_worker, workers

WIRE_MAGIC = 0x44484331
MSG_DATA = 1
MSG_BARRIER = 2
MSG_ERROR = 3
_HEADER = struct.Struct("<IIQQQ")
HEADER_BYTES = _HEADER.size

_message_count = 0
_message_lock = threading.Lock()


def message_count() -> int:
    return _message_count


def _count_message() -> None:
    global _message_count
    with _message_lock:
        _message_count += 1


def pack_frame(msg_type: int, coll_id: int, offset: int, payload: bytes) -> bytes:
    return _HEADER.pack(WIRE_MAGIC, msg_type, coll_id, offset, len(payload)) + payload


def unpack_frame(data: bytes) -> tuple[int, int, int, bytes]:
    if len(data) < HEADER_BYTES:
        raise TransportError(f"short frame: {len(data)} bytes")
    magic, msg_type, coll_id, offset, length = _HEADER.unpack_from(data)
    if magic != WIRE_MAGIC:
        raise TransportError(f"bad frame magic 0x{magic:08x}")
    payload = data[HEADER_BYTES: HEADER_BYTES + length]
    if len(payload) != length:
        raise TransportError(f"truncated payload: {len(payload)} of {length} bytes")
    return msg_type, coll_id, offset, payload


# -- transports ---------------------------------------------------------------------


class InProcHub:
    """Shared mailbox grid for in-process ranks; supports delay injection."""

    def __init__(self, size: int):
        self.size = size
        self.queues = {(s, d): queue.SimpleQueue()
                       for s in range(size) for d in range(size) if s != d}
        self.delay_fn = None  # fn(payload_bytes) -> seconds, for throttled tests

    def communicators(self, **kwargs) -> list["Communicator"]:
        return [Communicator(rank, self.size, InProcTransport(self, rank), **kwargs)
                for rank in range(self.size)]


class InProcTransport:
    def __init__(self, hub: InProcHub, rank: int):
        self.hub = hub
        self.rank = rank

    def send(self, dst: int, msg_type: int, coll_id: int, offset: int,
             payload: bytes) -> None:
        _count_message()
        if self.hub.delay_fn is not None:
            d = self.hub.delay_fn(len(payload))
            if d:
                time.sleep(d)
        self.hub.queues[(self.rank, dst)].put(
            pack_frame(msg_type, coll_id, offset, payload))

    def recv(self, src: int, timeout: float = 120.0) -> tuple[int, int, int, bytes]:
        try:
            data = self.hub.queues[(src, self.rank)].get(timeout=timeout)
        except queue.Empty:
            raise TransportError(f"rank {self.rank}: timeout receiving from {src}")
        return unpack_frame(data)

    def close(self) -> None:
        pass


class SocketTransport:
    """Ring-neighbor stream sockets: connect right, accept left."""

    def __init__(self, rank: int, size: int, master_addr: str, master_port: int,
                 timeout: float = 30.0):
        self.rank = rank
        self.size = size
        self._right: socket.socket | None = None
        self._left: socket.socket | None = None
        if size == 1:
            return
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind((master_addr, master_port + rank))
        listener.listen(1)
        deadline = time.monotonic() + timeout
        right_port = master_port + (rank + 1) % size
        while True:
            right = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            try:
                right.connect((master_addr, right_port))
                break
            except OSError:
                right.close()
                if time.monotonic() > deadline:
                    listener.close()
                    raise TransportError(f"rank {rank}: cannot reach peer on port {right_port}")
                time.sleep(0.05)
        listener.settimeout(timeout)
        try:
            left, _ = listener.accept()
        except socket.timeout:
            raise TransportError(f"rank {rank}: no connection from left neighbor")
        finally:
            listener.close()
        left.settimeout(timeout)
        self._right = right
        self._left = left

    def _sock_for_send(self, dst: int) -> socket.socket:
        if dst == (self.rank + 1) % self.size:
            return self._right
        if dst == (self.rank - 1) % self.size:
            return self._left
        raise TransportError(f"socket transport is ring-only; cannot send {self.rank}->{dst}")

    def send(self, dst: int, msg_type: int, coll_id: int, offset: int,
             payload: bytes) -> None:
        _count_message()
        try:
            self._sock_for_send(dst).sendall(
                pack_frame(msg_type, coll_id, offset, payload))
        except OSError as exc:
            raise TransportError(f"rank {self.rank}: send to {dst} failed: {exc}")

    def _read_exact(self, sock: socket.socket, n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            try:
                chunk = sock.recv(n - len(buf))
            except OSError as exc:
                raise TransportError(f"rank {self.rank}: recv failed: {exc}")
            if not chunk:
                raise TransportError(f"rank {self.rank}: peer disconnected")
            buf.extend(chunk)
        return bytes(buf)

    def recv(self, src: int, timeout: float = 120.0) -> tuple[int, int, int, bytes]:
        sock = self._left if src == (self.rank - 1) % self.size else self._right
        if src not in ((self.rank - 1) % self.size, (self.rank + 1) % self.size):
            raise TransportError(f"socket transport is ring-only; cannot recv {src}->{self.rank}")
        sock.settimeout(timeout)
        header = self._read_exact(sock, HEADER_BYTES)
        magic, msg_type, coll_id, offset, length = _HEADER.unpack(header)
        if magic != WIRE_MAGIC:
            raise TransportError(f"bad frame magic 0x{magic:08x}")
        payload = self._read_exact(sock, length) if length else b""
        return msg_type, coll_id, offset, payload

    def close(self) -> None:
        for s in (self._right, self._left):
            if s is not None:
                try:
                    s.close()
                except OSError:
                    pass


# -- collectives ----------------------------------------------------------------------


class CollectiveHandle:
    """Completion token; wait is idempotent, Done is terminal."""

    def __init__(self, op_id: int):
        self.op_id = op_id
        self._event = threading.Event()
        self._error: BaseException | None = None

    def _complete(self, error: BaseException | None = None) -> None:
        self._error = error
        self._event.set()

    def wait(self, timeout: float | None = 300.0) -> None:
        if not self._event.wait(timeout=timeout):
            raise TransportError(f"collective {self.op_id} timed out")
        if self._error is not None:
            raise self._error

    def test(self) -> bool:
        if self._event.is_set() and self._error is not None:
            raise self._error
        return self._event.is_set()


def _split_counts(total: int, parts: int) -> list[tuple[int, int]]:
    base, rem = divmod(total, parts)
    out, start = [], 0
    for i in range(parts):
        size = base + (1 if i < rem else 0)
        out.append((start, start + size))
        start += size
    return out


class Communicator:
    """One rank of a data-parallel group; collectives complete in issue order."""

    def __init__(self, rank: int, size: int, transport=None, name: str = "comm"):
        self.rank = rank
        self.size = size
        self.transport = transport
        self.bytes_moved = 0
        self._ops: queue.SimpleQueue = queue.SimpleQueue()
        self._next_id = 0
        self._closed = False
        self._worker = threading.Thread(target=self._progress_loop,
                                        name=f"{name}-r{rank}", daemon=True)
        self._worker.start()

    # Collectives must be issued from a single flow per communicator; the
    # progress worker alone touches the transport.

    def allreduce_async(self, buffer, op: str = "sum") -> CollectiveHandle:
        if op != "sum":
            raise ValueError(f"unsupported reduce op {op!r}")
        arr = buffer.data if isinstance(buffer, T.Tensor) else buffer
        if not isinstance(arr, np.ndarray) or not arr.flags["C_CONTIGUOUS"]:
            raise ValueError("allreduce buffer must be a contiguous ndarray")
        self._next_id += 1
        handle = CollectiveHandle(self._next_id)
        self._ops.put(("allreduce", handle, arr))
        return handle

    def barrier(self) -> None:
        self._next_id += 1
        handle = CollectiveHandle(self._next_id)
        self._ops.put(("barrier", handle, None))
        handle.wait()

    def _progress_loop(self) -> None:
        register_worker("comm")
        while True:
            item = self._ops.get()
            if item is None:
                return
            kind, handle, arr = item
            try:
                if kind == "allreduce":
                    self._ring_allreduce(handle.op_id, arr)
                elif kind == "barrier":
                    self._ring_barrier(handle.op_id)
                handle._complete()
            except BaseException as exc:
                handle._complete(error=exc)

    def _recv_checked(self, src: int, coll_id: int) -> tuple[int, bytes]:
        msg_type, got_id, offset, payload = self.transport.recv(src)
        if msg_type == MSG_ERROR:
            # propagate once around the ring so every rank fails
            if self.size > 1:
                self.transport.send((self.rank + 1) % self.size, MSG_ERROR,
                                    coll_id, 0, payload)
            raise CollectiveError(
                f"rank {self.rank}: collective {coll_id} aborted by a peer: "
                f"{payload.decode(errors='replace')}")
        if got_id != coll_id:
            raise CollectiveError(
                f"rank {self.rank}: expected collective {coll_id}, got {got_id}")
        return offset, payload

    def _abort(self, coll_id: int, reason: str) -> None:
        if self.size > 1:
            self.transport.send((self.rank + 1) % self.size, MSG_ERROR, coll_id,
                                0, reason.encode())

    def _ring_allreduce(self, coll_id: int, arr: np.ndarray) -> None:
        if self.size == 1:
            return
        right = (self.rank + 1) % self.size
        left = (self.rank - 1) % self.size
        # header exchange: byte lengths must agree on all ranks
        self.transport.send(right, MSG_BARRIER, coll_id, arr.nbytes, b"")
        _, got_id, peer_nbytes, _ = self.transport.recv(left)
        if got_id != coll_id or peer_nbytes != arr.nbytes:
            self._abort(coll_id, f"size mismatch: {arr.nbytes} vs {peer_nbytes}")
            raise CollectiveError(
                f"rank {self.rank}: allreduce size mismatch "
                f"({arr.nbytes} here, {peer_nbytes} upstream)")
        flat = arr.reshape(-1)
        chunks = _split_counts(flat.size, self.size)
        itemsize = flat.itemsize
        for step in range(self.size - 1):
            send_c = (self.rank - step) % self.size
            recv_c = (self.rank - step - 1) % self.size
            s0, s1 = chunks[send_c]
            r0, r1 = chunks[recv_c]
            self.transport.send(right, MSG_DATA, coll_id, s0 * itemsize,
                                flat[s0:s1].tobytes())
            offset, payload = self._recv_checked(left, coll_id)
            self.bytes_moved += len(payload)
            if payload:
                incoming = np.frombuffer(payload, dtype=flat.dtype)
                np.add(flat[r0:r1], incoming, out=flat[r0:r1])
        for step in range(self.size - 1):
            send_c = (self.rank + 1 - step) % self.size
            recv_c = (self.rank - step) % self.size
            s0, s1 = chunks[send_c]
            r0, r1 = chunks[recv_c]
            self.transport.send(right, MSG_DATA, coll_id, s0 * itemsize,
                                flat[s0:s1].tobytes())
            offset, payload = self._recv_checked(left, coll_id)
            self.bytes_moved += len(payload)
            if payload:
                flat[r0:r1] = np.frombuffer(payload, dtype=flat.dtype)

    def _ring_barrier(self, coll_id: int) -> None:
        if self.size == 1:
            return
        right = (self.rank + 1) % self.size
        left = (self.rank - 1) % self.size
        for _ in range(2):  # two laps: everyone entered, everyone saw it
            self.transport.send(right, MSG_BARRIER, coll_id, 0, b"")
            self._recv_checked(left, coll_id)

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        self._ops.put(None)
        self._worker.join(timeout=10.0)
        if self.transport is not None:
            self.transport.close()


def wait(handle: CollectiveHandle) -> None:
    handle.wait()


def test(handle: CollectiveHandle) -> bool:
    return handle.test()


# -- gradient bucketing ------------------------------------------------------------------


@dataclass
class GradBucket:
    params: list = field(default_factory=list)
    nbytes: int = 0
    flat: np.ndarray | None = None
    slices: dict = field(default_factory=dict)  # param id -> (start, end)
    ready: set = field(default_factory=set)
    handle: CollectiveHandle | None = None


class BucketReducer:
    """Reverse-order gradient buckets, reduced as they fill during backward."""

    def __init__(self, comm: Communicator, params: list[T.Tensor],
                 threshold_bytes: float = 4 * 1024 * 1024):
        self.comm = comm
        self.params = params
        self.threshold = threshold_bytes
        self.buckets: list[GradBucket] = []
        self._bucket_of: dict[int, GradBucket] = {}
        bucket = GradBucket()
        for p in reversed(params):
            bucket.params.append(p)
            bucket.nbytes += p.nbytes
            self._bucket_of[p.id] = bucket
            if bucket.nbytes >= threshold_bytes:
                self.buckets.append(bucket)
                bucket = GradBucket()
        if bucket.params:
            self.buckets.append(bucket)
        for b in self.buckets:
            start = 0
            for p in b.params:
                b.slices[p.id] = (start, start + p.size)
                start += p.size
        self._issued: list[GradBucket] = []

    def on_grad_ready(self, param: T.Tensor) -> None:
        b = self._bucket_of[param.id]
        b.ready.add(param.id)
        if len(b.ready) == len(b.params):
            dtype = b.params[0].dtype.np
            if b.flat is None:
                b.flat = np.empty(sum(p.size for p in b.params), dtype=dtype)
            for p in b.params:
                s, e = b.slices[p.id]
                b.flat[s:e] = p.grad.data.reshape(-1)
            b.handle = self.comm.allreduce_async(b.flat)
            self._issued.append(b)

    def finish(self) -> list[CollectiveHandle]:
        """Wait all issued buckets in order and write averaged grads back."""
        handles = [b.handle for b in self._issued]
        missing = [p.name for b in self.buckets for p in b.params
                   if b not in self._issued]
        if missing:
            raise CollectiveError(
                f"bucket composition diverged; grads never arrived for {missing}")
        inv = 1.0
        for b in self._issued:
            b.handle.wait()
            np.multiply(b.flat, b.flat.dtype.type(1.0 / self.comm.size), out=b.flat)
            for p in b.params:
                s, e = b.slices[p.id]
                p.grad.data[...] = b.flat[s:e].reshape(p.shape)
        done = handles
        self._issued = []
        for b in self.buckets:
            b.ready.clear()
            b.handle = None
        return done


# -- worker binding -------------------------------------------------------------------


def bind_workers(compute_cores, comm_cores, transfer_cores) -> None:
    """Best-effort affinity; semantics never change if pinning is unavailable."""
    sets = [set(compute_cores), set(comm_cores), set(transfer_cores)]
    for i in range(len(sets)):
        for j in range(i + 1, len(sets)):
            if sets[i] & sets[j]:
                raise ValueError(f"core sets overlap: {sorted(sets[i] & sets[j])}")
    if not hasattr(os, "sched_setaffinity"):
        warnings.warn("affinity is not supported on this platform; continuing unpinned")
        return
    plan = {"compute": sets[0], "comm": sets[1], "transfer": sets[2]}
    for kind, cores in plan.items():
        if not cores:
            continue
        for t in workers(kind):
            tid = getattr(t, "native_id", None)
            if tid is None:
                continue
            try:
                os.sched_setaffinity(tid, cores)
            except OSError as exc:
                warnings.warn(f"could not pin {t.name}: {exc}")


# -- communication-free cluster parallelism ----------------------------------------------


@dataclass
class ClusterGroup:
    gid: int
    threads: int = 1


def make_cluster_groups(count: int, threads_per_group: int = 1) -> list[ClusterGroup]:
    if count < 1:
        raise ValueError("cluster count must be >= 1")
    return [ClusterGroup(gid=i, threads=threads_per_group) for i in range(count)]


def cftp_run(op_kind: str, operands: tuple, groups: list[ClusterGroup],
             cfg: TileConfig | None = None):
    """Run one op split across cluster groups; asserts zero messages were sent."""
    base = cfg or TileConfig()
    run_cfg = TileConfig(**{**base.__dict__, "clusters": len(groups),
                            "threads_per_cluster": groups[0].threads if groups else 1})
    before = message_count()
    if op_kind == "gemm":
        a, b, c = operands[:3]
        alpha = operands[3] if len(operands) > 3 else 1.0
        beta = operands[4] if len(operands) > 4 else 0.0
        gemm(a, b, c, alpha=alpha, beta=beta, cfg=run_cfg)
        result = c
    elif op_kind == "gemm_bias":
        a, b, bias, c = operands
        gemm_bias(a, b, bias, c, cfg=run_cfg)
        result = c
    elif op_kind == "rowwise":
        fn, x, out = operands
        np.copyto(out.data if isinstance(out, T.Tensor) else out,
                  fn(x.data if isinstance(x, T.Tensor) else x))
        result = out
    else:
        raise ValueError(f"unsupported cftp op kind {op_kind!r}")
    sent = message_count() - before
    if sent != 0:
        raise AssertionError(f"cftp sent {sent} messages; contract requires zero")
    return result


# -- launcher environment ------------------------------------------------------------------


ENV_RANK = "DITHC_RANK"
ENV_WORLD = "DITHC_WORLD_SIZE"
ENV_ADDR = "DITHC_MASTER_ADDR"
ENV_PORT = "DITHC_MASTER_PORT"


def env_rank_config() -> dict | None:
    """Parse the multi-process launcher environment, if present."""
    if ENV_RANK not in os.environ:
        return None
    return {
        "rank": int(os.environ[ENV_RANK]),
        "world_size": int(os.environ.get(ENV_WORLD, "1")),
        "master_addr": os.environ.get(ENV_ADDR, "127.0.0.1"),
        "master_port": int(os.environ.get(ENV_PORT, "29400")),
    }


def communicator_from_env(cfg: dict | None = None) -> Communicator | None:
    cfg = cfg or env_rank_config()
    if cfg is None or cfg["world_size"] <= 1:
        return None
    transport = SocketTransport(cfg["rank"], cfg["world_size"],
                                cfg["master_addr"], cfg["master_port"])
    return Communicator(cfg["rank"], cfg["world_size"], transport)
