"""Deterministic synthetic fluorescence video generator with ground truth.

Cells are jittered elliptical Gaussian footprints; traces are Poisson spike
trains convolved with a double-exponential calcium kernel; i.i.d. Gaussian
noise is added at a requested SNR. Everything is reproducible from the seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from numpy.typing import NDArray

SUPPORT_CUTOFF = 0.05  # footprint values below this fraction of the peak are dropped
OVERLAP_TOLERANCE = 0.05
PLACEMENT_TRIES = 500


@dataclass(frozen=True)
class GeneratorConfig:
    width: int = 128
    height: int = 128
    frames: int = 600
    n_cells: int = 15
    cell_radius_range: Tuple[float, float] = (3.0, 6.0)
    amplitude_range: Tuple[float, float] = (1.0, 2.0)
    overlap_fraction: float = 0.0
    snr: float = 5.0
    spike_rate: float = 0.02
    decay_tau: float = 10.0
    rise_tau: float = 2.0
    background: float = 1.0
    shape_jitter: float = 0.15
    seed: int = 0

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0 or self.frames <= 0:
            raise ValueError("dimensions and frame count must be positive")
        if self.n_cells < 0:
            raise ValueError("cell count must be non-negative")
        if self.cell_radius_range[0] <= 0 or self.cell_radius_range[1] < self.cell_radius_range[0]:
            raise ValueError("cell radius range must be positive and ordered")
        if not 0.0 <= self.overlap_fraction < 1.0:
            raise ValueError("overlap fraction must be in [0, 1)")
        if self.snr <= 0:
            raise ValueError("snr must be positive (may be inf)")
        if self.spike_rate <= 0:
            raise ValueError("spike rate must be positive")
        if self.decay_tau <= 0 or self.rise_tau <= 0 or self.rise_tau >= self.decay_tau:
            raise ValueError("time constants must satisfy 0 < rise_tau < decay_tau")
        if not 0.0 <= self.shape_jitter < 1.0:
            raise ValueError("shape jitter must be in [0, 1)")


@dataclass(frozen=True)
class CellTruth:
    """One planted cell: unit-peak footprint, brightness scale, and trace."""

    footprint: NDArray[np.float64]  # (height, width), peak value 1
    amplitude: float
    center: Tuple[float, float]  # (row, col)
    trace: NDArray[np.float64]  # (frames,), unit-peak transients

    @property
    def support(self) -> NDArray[np.bool_]:
        return self.footprint > 0


@dataclass(frozen=True)
class GroundTruth:
    config: GeneratorConfig
    cells: Tuple[CellTruth, ...]
    video: NDArray[np.float64]  # (frames, height, width)
    noise: NDArray[np.float64]
    background: float

    def clean(self) -> NDArray[np.float64]:
        """Video with the noise removed: sum of cells plus background."""
        return self.video - self.noise


@dataclass
class _Shape:
    a: float
    b: float
    theta: float
    jitter: NDArray[np.float64]  # multiplicative field anchored to the cell box
    half: int  # box half-width

    def footprint_at(
        self, center: Tuple[float, float], height: int, width: int
    ) -> Optional[NDArray[np.float64]]:
        """Dense unit-peak footprint, or None when the box leaves the frame."""
        r0 = int(round(center[0])) - self.half
        c0 = int(round(center[1])) - self.half
        size = 2 * self.half + 1
        if r0 < 0 or c0 < 0 or r0 + size > height or c0 + size > width:
            return None
        rows = np.arange(r0, r0 + size, dtype=np.float64)[:, None] - center[0]
        cols = np.arange(c0, c0 + size, dtype=np.float64)[None, :] - center[1]
        u = (cols * math.cos(self.theta) + rows * math.sin(self.theta)) / self.a
        v = (-cols * math.sin(self.theta) + rows * math.cos(self.theta)) / self.b
        values = np.exp(-(u**2 + v**2) / 2.0) * self.jitter
        values[values < SUPPORT_CUTOFF * values.max()] = 0.0
        values /= values.max()
        out = np.zeros((height, width), dtype=np.float64)
        out[r0 : r0 + size, c0 : c0 + size] = values
        return out


def _draw_shape(rng: np.random.Generator, config: GeneratorConfig) -> _Shape:
    lo, hi = config.cell_radius_range
    a = rng.uniform(lo, hi)
    b = rng.uniform(lo, hi)
    theta = rng.uniform(0.0, math.pi)
    half = int(math.ceil(2.5 * max(a, b)))
    size = 2 * half + 1
    jitter = 1.0 + config.shape_jitter * rng.uniform(-1.0, 1.0, size=(size, size))
    return _Shape(a=a, b=b, theta=theta, jitter=jitter, half=half)


def _overlap_ratio(a: NDArray[np.bool_], b: NDArray[np.bool_]) -> float:
    inter = int(np.count_nonzero(a & b))
    return inter / min(int(np.count_nonzero(a)), int(np.count_nonzero(b)))


def _place_free(
    rng: np.random.Generator,
    shape: _Shape,
    occupied: NDArray[np.bool_],
    config: GeneratorConfig,
) -> Tuple[Tuple[float, float], NDArray[np.float64]]:
    """Center whose support touches no occupied pixel."""
    height, width = config.height, config.width
    for _ in range(PLACEMENT_TRIES):
        center = (
            rng.uniform(shape.half, height - 1 - shape.half),
            rng.uniform(shape.half, width - 1 - shape.half),
        )
        footprint = shape.footprint_at(center, height, width)
        if footprint is None:
            continue
        if not np.any((footprint > 0) & occupied):
            return center, footprint
    raise ValueError(f"could not place {config.n_cells} non-overlapping cells in the frame")


def _place_overlapping(
    rng: np.random.Generator,
    shape: _Shape,
    anchor_support: NDArray[np.bool_],
    anchor_center: Tuple[float, float],
    occupied_others: NDArray[np.bool_],
    config: GeneratorConfig,
) -> Tuple[Tuple[float, float], NDArray[np.float64]]:
    """Center at a distance from the anchor that hits the target overlap."""
    height, width = config.height, config.width
    target = config.overlap_fraction
    for _ in range(16):
        angle = rng.uniform(0.0, 2.0 * math.pi)
        direction = (math.sin(angle), math.cos(angle))
        # overlap ratio decreases monotonically with center distance
        lo, hi = 0.0, 4.0 * shape.half
        best: Optional[Tuple[Tuple[float, float], NDArray[np.float64]]] = None
        for _ in range(48):
            mid = 0.5 * (lo + hi)
            center = (
                anchor_center[0] + mid * direction[0],
                anchor_center[1] + mid * direction[1],
            )
            footprint = shape.footprint_at(center, height, width)
            if footprint is None:
                hi = mid  # walked out of the frame; pull back in
                continue
            ratio = _overlap_ratio(footprint > 0, anchor_support)
            if abs(ratio - target) <= OVERLAP_TOLERANCE and not np.any(
                (footprint > 0) & occupied_others
            ):
                best = (center, footprint)
                break
            if ratio > target:
                lo = mid
            else:
                hi = mid
        if best is not None:
            return best
    raise ValueError(
        f"could not achieve the requested overlap fraction {config.overlap_fraction}"
    )


def _calcium_kernel(config: GeneratorConfig) -> NDArray[np.float64]:
    length = int(math.ceil(8.0 * config.decay_tau))
    t = np.arange(length, dtype=np.float64)
    kernel = np.exp(-t / config.decay_tau) - np.exp(-t / config.rise_tau)
    return kernel / kernel.max()


def _spike_trace(rng: np.random.Generator, kernel: NDArray, config: GeneratorConfig) -> NDArray:
    counts = rng.poisson(config.spike_rate, size=config.frames).astype(np.float64)
    if not counts.any():
        counts[int(rng.integers(config.frames))] = 1.0  # every cell fires at least once
    return np.convolve(counts, kernel)[: config.frames]


def generate(config: GeneratorConfig) -> GroundTruth:
    """Build the video and its exact decomposition from a seeded config.

    With ``overlap_fraction > 0`` cells are placed in consecutive pairs
    (0, 1), (2, 3), ... whose supports overlap by that fraction of the
    smaller footprint; distinct pairs stay disjoint. An odd trailing cell
    is placed freely.
    """
    rng = np.random.default_rng(config.seed)
    height, width, frames = config.height, config.width, config.frames

    cells: List[CellTruth] = []
    occupied = np.zeros((height, width), dtype=bool)
    kernel = _calcium_kernel(config)
    anchor: Optional[CellTruth] = None
    anchor_occupancy: Optional[NDArray[np.bool_]] = None
    for k in range(config.n_cells):
        shape = _draw_shape(rng, config)
        if config.overlap_fraction > 0.0 and k % 2 == 1:
            assert anchor is not None and anchor_occupancy is not None
            center, footprint = _place_overlapping(
                rng, shape, anchor.support, anchor.center, anchor_occupancy, config
            )
        else:
            center, footprint = _place_free(rng, shape, occupied, config)
        amplitude = float(rng.uniform(*config.amplitude_range))
        trace = _spike_trace(rng, kernel, config)
        cell = CellTruth(footprint=footprint, amplitude=amplitude, center=center, trace=trace)
        anchor_occupancy = occupied.copy()  # everything placed before this cell
        occupied |= cell.support
        anchor = cell
        cells.append(cell)

    clean = np.zeros((frames, height, width), dtype=np.float64)
    for cell in cells:
        rows, cols = np.nonzero(cell.footprint)
        r0, r1 = rows.min(), rows.max() + 1
        c0, c1 = cols.min(), cols.max() + 1
        box = cell.amplitude * cell.footprint[r0:r1, c0:c1]
        clean[:, r0:r1, c0:c1] += cell.trace[:, None, None] * box[None, :, :]
    clean += config.background

    if math.isinf(config.snr):
        noise = np.zeros_like(clean)
    else:
        mean_amplitude = (
            float(np.mean([c.amplitude for c in cells])) if cells else 1.0
        )
        sigma = mean_amplitude / config.snr
        noise = rng.normal(0.0, sigma, size=clean.shape)

    return GroundTruth(
        config=config,
        cells=tuple(cells),
        video=clean + noise,
        noise=noise,
        background=config.background,
    )
