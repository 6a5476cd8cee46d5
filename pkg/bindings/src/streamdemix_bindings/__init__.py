"""Scripting wrapper over the streamdemix engine: handles in, events out."""

__version__ = "0.1.0"

from .handle import (
    ClosedHandleError,
    EngineHandle,
    close,
    create_engine,
    export_config,
    push_frame,
    snapshot,
)

__all__ = [
    "ClosedHandleError",
    "EngineHandle",
    "close",
    "create_engine",
    "export_config",
    "push_frame",
    "snapshot",
    "__version__",
]
