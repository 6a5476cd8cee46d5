"""Scoring of engine output against ground truth, plus throughput measurement.

Detection quality is a greedy one-to-one assignment between recovered
profiles and planted cells; trace quality separates real transients from
contamination leaked by overlapping cells; throughput is wall-clock frames
per second on a warmed-up engine.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.typing import NDArray

from .config import EngineConfig
from .engine import Engine
from .model import FrameGeometry
from .pipeline import mad_sigma
from .synth import GroundTruth

STRONG_CORR = 0.8
WEAK_CORR = 0.5
MIN_OVERLAP = 0.3
# a planted trace counts as "on" above this fraction of its peak; planted
# traces are noiseless, so a fixed relative level is exact enough
TRUE_WINDOW_FRACTION = 0.2


@dataclass(frozen=True)
class MatchPair:
    """One assigned (found, truth) pair with its evidence."""

    found_index: int
    truth_index: int
    overlap: float
    correlation: float


@dataclass(frozen=True)
class MatchReport:
    strong_hits: int
    weak_hits: int
    false_alarms: int
    misses: int
    pairs: Tuple[MatchPair, ...]

    @property
    def hit_correlations(self) -> NDArray[np.float64]:
        return np.array([p.correlation for p in self.pairs])

    @property
    def mean_hit_correlation(self) -> float:
        corr = self.hit_correlations
        return float(corr.mean()) if corr.size else 0.0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


@dataclass(frozen=True)
class TransientReport:
    tpr: float
    fpr: float
    kept_real_fluorescence: float
    kept_false_fluorescence: float


@dataclass(frozen=True)
class ThroughputReport:
    fps_mean: float
    cpu_seconds_per_frame: float
    latencies: NDArray[np.float64]  # wall seconds per timed frame
    n_cells: int

    def to_dict(self) -> dict:
        return {
            "fps_mean": self.fps_mean,
            "cpu_seconds_per_frame": self.cpu_seconds_per_frame,
            "n_cells": self.n_cells,
            "n_frames_timed": int(self.latencies.size),
        }

    def write_latency_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["frame", "seconds"])
            for i, value in enumerate(self.latencies):
                writer.writerow([i, f"{value:.6f}"])


def _pearson(a: NDArray, b: NDArray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a = a - a.mean()
    b = b - b.mean()
    denom = float(np.linalg.norm(a) * np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(a @ b) / denom


def _support_pixels(cell, width: int) -> NDArray[np.int64]:
    rows, cols = np.nonzero(cell.footprint)
    return rows.astype(np.int64) * width + cols.astype(np.int64)


def _overlap_over_min(a: NDArray[np.int64], b: NDArray[np.int64]) -> float:
    inter = np.intersect1d(a, b, assume_unique=True).size
    return inter / min(a.size, b.size)


def match_cells(
    found,
    truth: GroundTruth,
    strong_corr: float = STRONG_CORR,
    weak_corr: float = WEAK_CORR,
    min_overlap: float = MIN_OVERLAP,
) -> MatchReport:
    """Greedy one-to-one assignment by descending trace correlation.

    ``found`` is a snapshot-like object (``.profiles`` with per-profile
    ``pixels`` and ``trace``) or a plain sequence of such profiles. Pairs
    are eligible when footprint overlap over the smaller area reaches
    ``min_overlap`` and correlation reaches ``weak_corr``; an assigned pair
    is a strong hit at ``strong_corr``. Leftover found profiles are false
    alarms, leftover truth cells are misses.
    """
    profiles = list(found.profiles if hasattr(found, "profiles") else found)
    width = truth.config.width
    supports = [_support_pixels(cell, width) for cell in truth.cells]

    candidates: List[Tuple[float, int, int, float]] = []
    for ti, cell in enumerate(truth.cells):
        for fi, profile in enumerate(profiles):
            overlap = _overlap_over_min(supports[ti], np.asarray(profile.pixels))
            if overlap < min_overlap:
                continue
            trace = np.asarray(profile.trace)
            n = min(cell.trace.size, trace.size)
            corr = _pearson(cell.trace[:n], trace[:n])
            if corr < weak_corr:
                continue
            candidates.append((corr, ti, fi, overlap))
    candidates.sort(key=lambda c: (-c[0], c[1], c[2]))

    pairs: List[MatchPair] = []
    used_truth: set = set()
    used_found: set = set()
    for corr, ti, fi, overlap in candidates:
        if ti in used_truth or fi in used_found:
            continue
        used_truth.add(ti)
        used_found.add(fi)
        pairs.append(MatchPair(found_index=fi, truth_index=ti, overlap=overlap, correlation=corr))

    strong = sum(1 for p in pairs if p.correlation >= strong_corr)
    return MatchReport(
        strong_hits=strong,
        weak_hits=len(pairs) - strong,
        false_alarms=len(profiles) - len(pairs),
        misses=len(truth.cells) - len(pairs),
        pairs=tuple(pairs),
    )


def _windows_from_mask(mask: NDArray[np.bool_]) -> List[Tuple[int, int]]:
    """Contiguous True runs as half-open (start, end) ranges."""
    padded = np.concatenate([[False], mask, [False]])
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    return list(zip(edges[0::2], edges[1::2]))


def _window_mask(windows: Iterable[Tuple[int, int]], length: int) -> NDArray[np.bool_]:
    mask = np.zeros(length, dtype=bool)
    for start, end in windows:
        mask[max(0, int(start)) : min(length, int(end))] = True
    return mask


def transient_metrics(
    found_trace: NDArray,
    truth_trace: NDArray,
    contaminant_windows: Sequence[Tuple[int, int]],
    false_reference: Optional[NDArray] = None,
) -> TransientReport:
    """Transient detection rates and kept-fluorescence fractions.

    A found transient is a contiguous run above three robust deviations of
    the found trace. ``truth_trace`` (in the same brightness units as the
    found trace) defines the cell's real-activity windows; a found transient
    overlapping one counts toward the true positive rate, one inside a
    contaminant-only window toward the false positive rate. Kept real
    fluorescence is the found trace's energy over real windows relative to
    the planted energy there; kept false fluorescence is the energy over
    contaminant windows relative to ``false_reference`` over the same frames
    (relative to the found trace's own total when no reference is given).
    """
    found = np.asarray(found_trace, dtype=np.float64)
    truth = np.asarray(truth_trace, dtype=np.float64)
    if found.shape != truth.shape:
        raise ValueError("traces must have equal length")
    n = found.size

    threshold = 3.0 * mad_sigma(found)
    if threshold <= 0.0:
        threshold = 0.05 * float(found.max()) if found.max() > 0 else np.inf
    found_active = found > threshold

    true_mask = truth > TRUE_WINDOW_FRACTION * truth.max() if truth.max() > 0 else np.zeros(n, bool)
    true_windows = _windows_from_mask(true_mask)
    false_mask = _window_mask(contaminant_windows, n)

    if true_windows:
        tpr = float(np.mean([found_active[s:e].any() for s, e in true_windows]))
    else:
        tpr = 1.0
    contaminant_list = list(contaminant_windows)
    if contaminant_list:
        fpr = float(
            np.mean(
                [found_active[max(0, int(s)) : min(n, int(e))].any() for s, e in contaminant_list]
            )
        )
    else:
        fpr = 0.0

    planted_real = float(truth[true_mask].sum())
    kept_real = float(found[true_mask].sum()) / planted_real if planted_real > 0 else 0.0

    false_energy = float(found[false_mask].sum())
    if false_reference is not None:
        reference = np.asarray(false_reference, dtype=np.float64)
        denom = float(reference[false_mask].sum())
    else:
        denom = float(found.sum())
    kept_false = false_energy / denom if denom > 0 else 0.0

    return TransientReport(
        tpr=float(np.clip(tpr, 0.0, 1.0)),
        fpr=float(np.clip(fpr, 0.0, 1.0)),
        kept_real_fluorescence=float(np.clip(kept_real, 0.0, 1.0)),
        kept_false_fluorescence=float(np.clip(kept_false, 0.0, 1.0)),
    )


def measure_throughput(
    video: NDArray, config: EngineConfig, warmup: int = 10
) -> ThroughputReport:
    """Wall-clock frames per second of a warmed-up engine on ``video``.

    The first ``warmup`` frames (at most a quarter of the video) prime the
    noise floors and solver warm starts without being timed; file I/O never
    enters the measurement because frames are already in memory.
    """
    video = np.asarray(video, dtype=np.float64)
    n_frames, height, width = video.shape
    engine = Engine(config, FrameGeometry(width=width, height=height))
    warmup = min(warmup, n_frames // 4)
    try:
        for t in range(warmup):
            engine.push_frame(video[t])
        latencies = np.zeros(n_frames - warmup)
        cpu_start = time.process_time()
        wall_start = time.perf_counter()
        for i, t in enumerate(range(warmup, n_frames)):
            tick = time.perf_counter()
            engine.push_frame(video[t])
            latencies[i] = time.perf_counter() - tick
        wall_total = time.perf_counter() - wall_start
        cpu_total = time.process_time() - cpu_start
        n_cells = engine.n_stable_profiles
    finally:
        engine.close()
    timed = max(1, n_frames - warmup)
    return ThroughputReport(
        fps_mean=timed / wall_total if wall_total > 0 else float("inf"),
        cpu_seconds_per_frame=cpu_total / timed,
        latencies=latencies,
        n_cells=n_cells,
    )
