"""Error types shared across the runtime."""


class OutOfTierError(MemoryError):
    """Raised when an arena allocation would exceed its tier's capacity.

    Never an implicit spill: the caller (usually the residency scheduler)
    must offload something first. Carries a capacity report when one is
    available at raise time.
    """

    def __init__(self, message: str, report: dict | None = None):
        super().__init__(message)
        self.report = report or {}


class TransportError(RuntimeError):
    """A communicator's transport failed (peer disconnect, bad frame)."""


class CollectiveError(TransportError):
    """A collective failed consistently across ranks (e.g. size mismatch)."""


class PlanMismatchError(RuntimeError):
    """Module execution diverged from the recorded warm-up plan."""
