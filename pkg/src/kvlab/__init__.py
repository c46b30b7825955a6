"""Desk-scale laboratory for KV-cache eviction policies."""

from .binio import (
    BadMagicError,
    ChecksumError,
    TraceFormatError,
    TraceShapeError,
    TraceTruncationError,
)
from .kvcache import (
    CacheView,
    KVCacheStore,
    QCache,
    QuerySet,
    Selection,
    WindowSpec,
    append_step,
    apply_selection,
    union_windows,
)
from .model import ModelConfig, ModelState, StepOutput, decode_step, greedy_token, init_model, prefill

__version__ = "0.1.0"
