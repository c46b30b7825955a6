from .capture import ATTN_IMPL_NAME, CaptureState, HookError
from .kvtr import write_kvtr
from .session import ExportResult, ExportSession, GeometryError, export_trace

__version__ = "0.1.0"

__all__ = [
    "ATTN_IMPL_NAME",
    "CaptureState",
    "HookError",
    "write_kvtr",
    "ExportResult",
    "ExportSession",
    "GeometryError",
    "export_trace",
]
