"""Handle-based wrapper over the streaming engine for scripting hosts.

A handle owns one engine. Frames are processed synchronously: push_frame
returns that frame's detection events before it returns control, and the
engine never calls back into the host. The underlying engine is created on
the first frame so the geometry comes from the data, exactly as the command
line does; construction only fixes the configuration.
"""

from __future__ import annotations

import threading
from typing import Any, Dict, List, Mapping, Optional, Tuple

import numpy as np
from numpy.typing import NDArray

from streamdemix import DetectionEvent, Engine, EngineConfig, FrameGeometry


class ClosedHandleError(RuntimeError):
    """Raised by any operation on a handle after close()."""


class EngineHandle:
    """Opaque reference to a configured engine instance.

    Single-owner: concurrent push_frame calls on one handle are an error,
    independent handles are fully independent.
    """

    def __init__(self, config: EngineConfig) -> None:
        self._config = config
        self._engine: Optional[Engine] = None
        self._closed = False
        self._gate = threading.Lock()

    def _require_open(self) -> None:
        if self._closed:
            raise ClosedHandleError("handle is closed")


def create_engine(config: Optional[Mapping[str, Any]] = None) -> EngineHandle:
    """Build a handle from a config mapping; an unknown key is named in the error.

    Missing keys take engine defaults. The profile set starts empty.
    """
    return EngineHandle(EngineConfig.from_dict(dict(config or {})))


def export_config(handle: EngineHandle) -> Dict[str, Any]:
    """Return the handle's full resolved configuration as a plain mapping."""
    handle._require_open()
    return handle._config.to_dict()


def push_frame(handle: EngineHandle, frame: NDArray) -> List[DetectionEvent]:
    """Process one frame synchronously and return its detection events.

    The pixel data is handed to the engine without copying when the array is
    already contiguous float64. The first frame fixes the geometry; later
    frames must match its shape.
    """
    handle._require_open()
    if not handle._gate.acquire(blocking=False):
        raise RuntimeError("concurrent push_frame on one handle")
    try:
        frame = np.asarray(frame)
        if frame.ndim != 2:
            raise ValueError(f"frame must be 2-D, got shape {frame.shape}")
        if handle._engine is None:
            height, width = frame.shape
            handle._engine = Engine(handle._config, FrameGeometry(width=width, height=height))
        return handle._engine.push_frame(frame)
    finally:
        handle._gate.release()


def snapshot(handle: EngineHandle) -> Tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Return immutable copies of the stable footprints and trace history.

    Footprints come back dense as (profiles, height, width), traces as
    (profiles, frames); both arrays are read-only and detached from the
    engine, so later frames do not change them.
    """
    handle._require_open()
    if handle._engine is None:
        profiles = np.zeros((0, 0, 0))
        traces = np.zeros((0, 0))
    else:
        snap = handle._engine.snapshot()
        height = snap.geometry.height
        width = snap.geometry.width
        profiles = np.zeros((len(snap.profiles), height, width))
        flat = profiles.reshape(len(snap.profiles), height * width)
        for i, profile in enumerate(snap.profiles):
            flat[i, profile.pixels] = profile.weights
        traces = snap.traces.copy()
    profiles.flags.writeable = False
    traces.flags.writeable = False
    return profiles, traces


def close(handle: EngineHandle) -> None:
    """Release the engine; repeated close is a no-op, other calls then fail."""
    if handle._closed:
        return
    if handle._engine is not None:
        handle._engine.close()
    handle._closed = True
