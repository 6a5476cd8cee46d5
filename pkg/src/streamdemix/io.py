"""Frame ingestion and result persistence.

Raw video format: a 16-byte header (magic ``SDX1``, width, height, frame
count, all little-endian unsigned 32-bit) followed by frames of float32
pixels in row-major order. TIFF input is restricted to single-channel
uncompressed grayscale (8- or 16-bit); pixel values become float brightness
as-is, with no normalization.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Dict, Iterator, List, Sequence, Tuple, Union

import numpy as np
from numpy.typing import NDArray
from PIL import Image, TiffImagePlugin

from .synth import CellTruth, GeneratorConfig, GroundTruth

RAW_MAGIC = b"SDX1"
HEADER_STRUCT = struct.Struct("<4sIII")  # magic, width, height, frames

PathLike = Union[str, Path]


@dataclass(frozen=True)
class VideoHeader:
    width: int
    height: int
    frames: int

    @property
    def frame_bytes(self) -> int:
        return self.width * self.height * 4


def write_raw_f32(path: PathLike, video: NDArray) -> VideoHeader:
    """Write a (frames, height, width) array as a raw float32 video file."""
    arr = np.asarray(video, dtype=np.float32)
    if arr.ndim != 3:
        raise ValueError("video must have shape (frames, height, width)")
    frames, height, width = arr.shape
    header = VideoHeader(width=width, height=height, frames=frames)
    with open(path, "wb") as fh:
        fh.write(HEADER_STRUCT.pack(RAW_MAGIC, width, height, frames))
        fh.write(arr.astype("<f4", copy=False).tobytes())
    return header


def read_raw_header(fh: IO[bytes]) -> VideoHeader:
    blob = fh.read(HEADER_STRUCT.size)
    if len(blob) < HEADER_STRUCT.size:
        raise ValueError("raw video header is truncated")
    magic, width, height, frames = HEADER_STRUCT.unpack(blob)
    if magic != RAW_MAGIC:
        raise ValueError(f"bad raw video magic: {magic!r}")
    if width == 0 or height == 0:
        raise ValueError("raw video header has zero dimensions")
    return VideoHeader(width=width, height=height, frames=frames)


def iter_raw_frames(source: Union[PathLike, IO[bytes]]) -> Iterator[NDArray[np.float64]]:
    """Stream frames from a raw video file or binary stream.

    A truncated final frame ends the stream cleanly with a warning; the
    declared frame count caps how many frames are read.
    """
    own = isinstance(source, (str, Path))
    fh: IO[bytes] = open(source, "rb") if own else source  # type: ignore[arg-type]
    try:
        header = read_raw_header(fh)
        for index in range(header.frames):
            blob = fh.read(header.frame_bytes)
            if len(blob) < header.frame_bytes:
                warnings.warn(
                    f"raw video truncated at frame {index} of {header.frames}",
                    RuntimeWarning,
                    stacklevel=2,
                )
                return
            frame = np.frombuffer(blob, dtype="<f4").reshape(header.height, header.width)
            yield frame.astype(np.float64)
    finally:
        if own:
            fh.close()


_TIFF_MODES = {"L", "I;16"}


def iter_tiff_frames(path: PathLike) -> Iterator[NDArray[np.float64]]:
    """Stream frames from a single-channel uncompressed grayscale TIFF."""
    with Image.open(path) as img:
        if not isinstance(img, TiffImagePlugin.TiffImageFile):
            raise ValueError("input is not a TIFF file")
        n_frames = getattr(img, "n_frames", 1)
        for index in range(n_frames):
            img.seek(index)
            compression = img.info.get("compression", "raw")
            if compression != "raw":
                raise ValueError(f"unsupported TIFF feature: compression {compression!r}")
            if img.mode not in _TIFF_MODES:
                raise ValueError(f"unsupported TIFF feature: mode {img.mode!r}")
            yield np.asarray(img, dtype=np.float64)


def ingest(source: PathLike, format: str) -> Iterator[NDArray[np.float64]]:
    """Frame iterator for a video file in the named format."""
    if format == "raw_f32":
        return iter_raw_frames(source)
    if format == "tiff_gray":
        return iter_tiff_frames(source)
    raise ValueError(f"unknown input format: {format}")


# -- result persistence -------------------------------------------------------

FOOTPRINT_HEADER = ["profile_id", "row", "col", "weight"]


def write_footprints(
    path: PathLike,
    profiles: Sequence,  # objects with .pixels (frame linear index) and .weights
    width: int,
) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(FOOTPRINT_HEADER)
        for pid, prof in enumerate(profiles):
            rows = prof.pixels // width
            cols = prof.pixels % width
            for r, c, w in zip(rows, cols, prof.weights):
                writer.writerow([pid, int(r), int(c), format(float(w), ".17g")])


def read_footprints(path: PathLike, width: int) -> List[Tuple[NDArray, NDArray]]:
    """Footprints back as (pixel index, weight) arrays, ordered by profile id."""
    table: Dict[int, List[Tuple[int, float]]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != FOOTPRINT_HEADER:
            raise ValueError(f"unexpected footprint header in {path}")
        for pid_s, row_s, col_s, weight_s in reader:
            table.setdefault(int(pid_s), []).append(
                (int(row_s) * width + int(col_s), float(weight_s))
            )
    out = []
    for pid in sorted(table):
        entries = sorted(table[pid])
        pixels = np.array([p for p, _ in entries], dtype=np.int64)
        weights = np.array([w for _, w in entries], dtype=np.float64)
        out.append((pixels, weights))
    return out


def write_traces(path: PathLike, traces: NDArray) -> None:
    """Trace matrix as CSV, one row per frame, one column per profile."""
    arr = np.asarray(traces, dtype=np.float64)
    n_profiles = arr.shape[0]
    n_frames = arr.shape[1] if arr.ndim == 2 else 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame"] + [f"profile_{k}" for k in range(n_profiles)])
        for t in range(n_frames):
            writer.writerow([t] + [format(float(v), ".17g") for v in arr[:, t]])


def read_traces(path: PathLike) -> NDArray[np.float64]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        n_profiles = len(header) - 1
        rows = [[float(v) for v in row[1:]] for row in reader]
    if not rows:
        return np.zeros((n_profiles, 0), dtype=np.float64)
    return np.asarray(rows, dtype=np.float64).T


def write_events(path: PathLike, events: Sequence) -> None:
    """Detection events as line-delimited JSON records."""
    with open(path, "w") as fh:
        for event in events:
            record = {
                "frame_index": int(event.frame_index),
                "profile_id": int(event.profile_id),
                "activation": float(event.activation),
                "kind": str(event.kind),
            }
            fh.write(json.dumps(record) + "\n")


def read_events(path: PathLike) -> List[Dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


# -- ground-truth manifest ----------------------------------------------------


def write_ground_truth(directory: PathLike, truth: GroundTruth) -> Tuple[Path, Path]:
    """Raw video plus a JSON manifest with the exact cell decomposition."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    video_path = directory / "video.raw"
    manifest_path = directory / "truth.json"
    write_raw_f32(video_path, truth.video)
    cells = []
    for cell in truth.cells:
        rows, cols = np.nonzero(cell.footprint)
        cells.append(
            {
                "center": list(cell.center),
                "amplitude": cell.amplitude,
                "rows": rows.tolist(),
                "cols": cols.tolist(),
                "weights": cell.footprint[rows, cols].tolist(),
                "trace": cell.trace.tolist(),
            }
        )
    manifest = {
        "config": dataclasses.asdict(truth.config),
        "background": truth.background,
        "cells": cells,
    }
    manifest_path.write_text(json.dumps(manifest))
    return video_path, manifest_path


def read_truth_manifest(path: PathLike) -> Tuple[GeneratorConfig, List[CellTruth]]:
    """Manifest back as a config plus dense-footprint cells."""
    data = json.loads(Path(path).read_text())
    raw_config = dict(data["config"])
    for key in ("cell_radius_range", "amplitude_range"):
        if key in raw_config:
            raw_config[key] = tuple(raw_config[key])
    config = GeneratorConfig(**raw_config)
    cells: List[CellTruth] = []
    for entry in data["cells"]:
        footprint = np.zeros((config.height, config.width), dtype=np.float64)
        footprint[np.asarray(entry["rows"]), np.asarray(entry["cols"])] = entry["weights"]
        cells.append(
            CellTruth(
                footprint=footprint,
                amplitude=float(entry["amplitude"]),
                center=tuple(entry["center"]),
                trace=np.asarray(entry["trace"], dtype=np.float64),
            )
        )
    return config, cells
