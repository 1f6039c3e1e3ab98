"""minidit: a desk-scale CPU training runtime for a small diffusion transformer.

Pieces: a two-tier arena memory system with an async transfer engine, a
cache/cluster-blocked deterministic GEMM, the transformer operator set with
explicit backwards, a DDPM training loop, a hook-driven residency scheduler,
and data parallelism over a nonblocking ring all-reduce.
"""

__version__ = "0.1.0"

from .errors import CollectiveError, OutOfTierError, PlanMismatchError, TransportError
from .gemm import TileConfig, gemm, gemm_bias, gemm_naive
from .memory import MemConfig, MemorySystem, MemTier, use_system
from .model import DiTConfig, DiTModel, config_for_model
from .tensor import Dtype, Tensor, set_debug_checks
from .trainer import Trainer, TrainSettings

__all__ = [
    "CollectiveError",
    "DiTConfig",
    "DiTModel",
    "Dtype",
    "MemConfig",
    "MemorySystem",
    "MemTier",
    "OutOfTierError",
    "PlanMismatchError",
    "Tensor",
    "TileConfig",
    "Trainer",
    "TrainSettings",
    "TransportError",
    "config_for_model",
    "gemm",
    "gemm_bias",
    "gemm_naive",
    "set_debug_checks",
    "use_system",
    "__version__",
]
