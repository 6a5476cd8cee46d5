"""Per-frame preprocessing: denoising, noise floor, candidate detection.

Noise is summarized per pixel as the half-amplitude sigma_half, the gap
between a local median and a local minimum. Sections of the frame get their
own median and minimum, which are bilinearly interpolated back to pixel
resolution so the threshold tracks slow background variation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
from numpy.typing import NDArray
from scipy import ndimage

Image = NDArray[np.float64]

DEFAULT_K_SIGMA = 3.0
DEFAULT_MIN_AREA = 4
DEFAULT_SECTIONS = (3, 3)
MIN_SECTION_PIXELS = 16

# 4-connectivity: separates cells that touch only diagonally
_STRUCTURE = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


@dataclass(frozen=True)
class DenoiseConfig:
    """Spatial blur width and running-average window (1 = no averaging)."""

    spatial_sigma: float = 1.0
    window: int = 1

    def __post_init__(self) -> None:
        if self.spatial_sigma < 0:
            raise ValueError("spatial_sigma must be non-negative")
        if self.window < 1:
            raise ValueError("window must be at least 1 frame")


@dataclass
class NoiseMap:
    """Per-pixel local median and half-amplitude noise level."""

    median: Image
    sigma_half: Image
    section_grid: Tuple[int, int]


@dataclass
class CandidateProfile:
    """A connected above-threshold region proposed as a new cell."""

    rows: NDArray[np.int64]
    cols: NDArray[np.int64]
    weights: NDArray[np.float64]
    bounding_box: Tuple[int, int, int, int]  # (row_min, col_min, row_max, col_max)
    birth_frame: int


def mad_sigma(values: NDArray) -> float:
    """Robust noise scale: 1.4826 times the median absolute deviation."""
    flat = np.asarray(values, dtype=np.float64).ravel()
    return 1.4826 * float(np.median(np.abs(flat - np.median(flat))))


def denoise(frame_history: Sequence[Image], config: DenoiseConfig) -> Image:
    """Blur the mean of the trailing window of frames.

    ``frame_history`` is ordered oldest to newest; only the last
    ``config.window`` frames participate.
    """
    if len(frame_history) == 0:
        raise ValueError("frame history is empty")
    recent = frame_history[-config.window :]
    mean = recent[0].astype(np.float64, copy=True)
    for f in recent[1:]:
        mean += f
    mean /= len(recent)
    if config.spatial_sigma == 0:
        return mean
    return ndimage.gaussian_filter(mean, sigma=config.spatial_sigma, mode="reflect")


def _section_slices(extent: int, count: int) -> List[slice]:
    edges = np.linspace(0, extent, count + 1).astype(int)
    return [slice(edges[i], edges[i + 1]) for i in range(count)]


def _interp_axis(extent: int, centers: NDArray) -> Tuple[NDArray, NDArray, NDArray]:
    """Per-pixel (left index, right index, right weight) with edge clamping."""
    coords = np.arange(extent, dtype=np.float64)
    coords = np.clip(coords, centers[0], centers[-1])
    right = np.searchsorted(centers, coords, side="right")
    right = np.clip(right, 1, len(centers) - 1) if len(centers) > 1 else np.zeros(extent, dtype=int)
    left = right - 1 if len(centers) > 1 else np.zeros(extent, dtype=int)
    if len(centers) == 1:
        return np.zeros(extent, dtype=int), np.zeros(extent, dtype=int), np.zeros(extent)
    span = centers[right] - centers[left]
    w = (coords - centers[left]) / np.where(span == 0, 1.0, span)
    return left, right, w


def _bilinear_field(values: NDArray, row_centers: NDArray, col_centers: NDArray, shape: Tuple[int, int]) -> Image:
    rl, rr, rw = _interp_axis(shape[0], row_centers)
    cl, cr, cw = _interp_axis(shape[1], col_centers)
    top = values[rl][:, cl] * (1 - cw)[None, :] + values[rl][:, cr] * cw[None, :]
    bottom = values[rr][:, cl] * (1 - cw)[None, :] + values[rr][:, cr] * cw[None, :]
    return top * (1 - rw)[:, None] + bottom * rw[:, None]


def estimate_noise(frame: Image, sections: Tuple[int, int] = DEFAULT_SECTIONS) -> NoiseMap:
    """Sectioned local medians and half-amplitude noise, smoothly interpolated.

    With a single section this reduces exactly to global
    ``median(frame) - min(frame)``.
    """
    frame = np.asarray(frame, dtype=np.float64)
    n_rows, n_cols = sections
    if n_rows < 1 or n_cols < 1:
        raise ValueError("section grid must be at least 1x1")
    if (frame.shape[0] // n_rows) * (frame.shape[1] // n_cols) < MIN_SECTION_PIXELS:
        raise ValueError("sections must each cover at least 16 pixels")

    row_slices = _section_slices(frame.shape[0], n_rows)
    col_slices = _section_slices(frame.shape[1], n_cols)
    med = np.zeros((n_rows, n_cols))
    low = np.zeros((n_rows, n_cols))
    row_centers = np.zeros(n_rows)
    col_centers = np.zeros(n_cols)
    for i, rs in enumerate(row_slices):
        row_centers[i] = (rs.start + rs.stop - 1) / 2.0
        for j, cs in enumerate(col_slices):
            block = frame[rs, cs]
            med[i, j] = np.median(block)
            low[i, j] = block.min()
    for j, cs in enumerate(col_slices):
        col_centers[j] = (cs.start + cs.stop - 1) / 2.0

    median_field = _bilinear_field(med, row_centers, col_centers, frame.shape)
    min_field = _bilinear_field(low, row_centers, col_centers, frame.shape)
    return NoiseMap(median=median_field, sigma_half=median_field - min_field, section_grid=(n_rows, n_cols))


def detect_components(
    residual: Image,
    noise: NoiseMap,
    k_sigma: float = DEFAULT_K_SIGMA,
    min_area: int = DEFAULT_MIN_AREA,
    birth_frame: int = 0,
) -> List[CandidateProfile]:
    """Connected regions of the residual above the local noise threshold.

    A pixel participates when its value exceeds
    ``local_median + k_sigma * sigma_half`` (and is positive); components
    are 4-connected and must reach ``min_area`` pixels.
    """
    residual = np.asarray(residual, dtype=np.float64)
    threshold = noise.median + k_sigma * noise.sigma_half
    mask = (residual > threshold) & (residual > 0)
    labels, count = ndimage.label(mask, structure=_STRUCTURE)
    candidates: List[CandidateProfile] = []
    for label_id, region in enumerate(ndimage.find_objects(labels, count), start=1):
        if region is None:
            continue
        rs, cs = region
        member = labels[rs, cs] == label_id
        if member.sum() < min_area:
            continue
        rr, cc = np.nonzero(member)
        rr = rr + rs.start
        cc = cc + cs.start
        candidates.append(
            CandidateProfile(
                rows=rr.astype(np.int64),
                cols=cc.astype(np.int64),
                weights=residual[rr, cc],
                bounding_box=(int(rr.min()), int(cc.min()), int(rr.max()), int(cc.max())),
                birth_frame=birth_frame,
            )
        )
    return candidates
