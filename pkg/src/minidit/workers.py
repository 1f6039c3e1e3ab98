"""Registry of long-lived worker threads, for affinity binding and audits."""

from __future__ import annotations

import threading

_registry: dict[str, list[threading.Thread]] = {"compute": [], "comm": [], "transfer": []}
_lock = threading.Lock()


def register_worker(kind: str, thread: threading.Thread | None = None) -> None:
    t = thread or threading.current_thread()
    with _lock:
        _registry.setdefault(kind, [])
        if t not in _registry[kind]:
            _registry[kind].append(t)


def workers(kind: str) -> list[threading.Thread]:
    with _lock:
        return [t for t in _registry.get(kind, []) if t.is_alive()]


def worker_names(kind: str) -> set[str]:
    return {t.name for t in workers(kind)}
