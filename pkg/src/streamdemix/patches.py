"""Field-of-view tiling, cross-patch profile matching, and gluing.

Large frames are split into square patches that run independent pipelines.
Profiles that touch a shared border are matched with a tiered score: the
spatial part compares footprint cross-sections on the 1-px perimeter strips
facing the border, the temporal part is the Pearson correlation of the two
activation traces over their joint active window. Matched profiles are glued
into global profiles with union-find so a cell spanning several patches
collapses to one output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from numpy.typing import NDArray

from .model import FrameGeometry
from .pipeline import mad_sigma
from .profiles import TAU_SAME, Profile, footprint_score

DEFAULT_PATCH_SIZE = 80
MIN_PATCH_SIZE = 16
TAU_GLUE = 0.6
TAU_CORR = 0.5
MIN_COMMON_ACTIVE = 5


@dataclass(frozen=True)
class PatchRect:
    """One tile of the frame.

    ``row0``/``col0``/``height``/``width`` describe the processing window in
    frame coordinates; with zero margin it equals the ownership tile.
    """

    index: int
    grid_row: int
    grid_col: int
    row0: int
    col0: int
    height: int
    width: int

    @property
    def geometry(self) -> FrameGeometry:
        return FrameGeometry(width=self.width, height=self.height)

    def subframe(self, frame: NDArray) -> NDArray:
        return frame[self.row0 : self.row0 + self.height, self.col0 : self.col0 + self.width]


@dataclass(frozen=True)
class PatchLayout:
    geometry: FrameGeometry
    patch_size: int
    margin: int
    rows: int
    cols: int
    patches: Tuple[PatchRect, ...]

    @property
    def n_patches(self) -> int:
        return len(self.patches)

    def rect(self, grid_row: int, grid_col: int) -> PatchRect:
        return self.patches[grid_row * self.cols + grid_col]

    def adjacent_pairs(self) -> List[Tuple[PatchRect, PatchRect]]:
        """Right and down neighbour of every tile, each pair listed once."""
        out: List[Tuple[PatchRect, PatchRect]] = []
        for gr in range(self.rows):
            for gc in range(self.cols):
                if gc + 1 < self.cols:
                    out.append((self.rect(gr, gc), self.rect(gr, gc + 1)))
                if gr + 1 < self.rows:
                    out.append((self.rect(gr, gc), self.rect(gr + 1, gc)))
        return out


def partition(
    geometry: FrameGeometry,
    patch_size: int = DEFAULT_PATCH_SIZE,
    margin: int = 0,
) -> PatchLayout:
    """Tile the frame exactly; the last row/column of tiles may be smaller.

    A patch size larger than the frame yields a single patch.
    """
    if patch_size < MIN_PATCH_SIZE:
        raise ValueError(f"patch size must be at least {MIN_PATCH_SIZE} pixels")
    if margin < 0:
        raise ValueError("margin must be non-negative")
    rows = max(1, math.ceil(geometry.height / patch_size))
    cols = max(1, math.ceil(geometry.width / patch_size))
    rects: List[PatchRect] = []
    for gr in range(rows):
        for gc in range(cols):
            core_r0 = gr * patch_size
            core_c0 = gc * patch_size
            core_h = min(patch_size, geometry.height - core_r0)
            core_w = min(patch_size, geometry.width - core_c0)
            r0 = max(0, core_r0 - margin)
            c0 = max(0, core_c0 - margin)
            r1 = min(geometry.height, core_r0 + core_h + margin)
            c1 = min(geometry.width, core_c0 + core_w + margin)
            rects.append(
                PatchRect(
                    index=gr * cols + gc,
                    grid_row=gr,
                    grid_col=gc,
                    row0=r0,
                    col0=c0,
                    height=r1 - r0,
                    width=c1 - c0,
                )
            )
    return PatchLayout(
        geometry=geometry,
        patch_size=patch_size,
        margin=margin,
        rows=rows,
        cols=cols,
        patches=tuple(rects),
    )


def shared_side(a: PatchRect, b: PatchRect) -> Optional[str]:
    """Side of ``a`` facing ``b`` when the tiles are grid neighbours."""
    if a.grid_row == b.grid_row and b.grid_col == a.grid_col + 1:
        return "right"
    if a.grid_row == b.grid_row and b.grid_col == a.grid_col - 1:
        return "left"
    if a.grid_col == b.grid_col and b.grid_row == a.grid_row + 1:
        return "bottom"
    if a.grid_col == b.grid_col and b.grid_row == a.grid_row - 1:
        return "top"
    return None


def _strip_restriction(
    profile: Profile, rect: PatchRect, side: str
) -> Tuple[NDArray[np.int64], NDArray[np.float64]]:
    """Footprint restricted to the 1-px band just inside one border.

    Returns (along-border frame coordinate, weight); the coordinate is the
    frame row for vertical borders and the frame column for horizontal ones,
    so restrictions from the two adjacent patches share an index space.
    """
    rows_local = profile.pixels // rect.width
    cols_local = profile.pixels % rect.width
    if side == "right":
        mask = cols_local == rect.width - 1
        along = rect.row0 + rows_local[mask]
    elif side == "left":
        mask = cols_local == 0
        along = rect.row0 + rows_local[mask]
    elif side == "bottom":
        mask = rows_local == rect.height - 1
        along = rect.col0 + cols_local[mask]
    elif side == "top":
        mask = rows_local == 0
        along = rect.col0 + cols_local[mask]
    else:
        raise ValueError(f"unknown side: {side}")
    return along.astype(np.int64), profile.weights[mask]


def active_frames(trace: NDArray) -> NDArray[np.bool_]:
    """Frames where a trace exceeds three robust standard deviations."""
    values = np.asarray(trace, dtype=np.float64)
    if values.size == 0:
        return np.zeros(0, dtype=bool)
    threshold = 3.0 * mad_sigma(values)
    if threshold <= 0.0:
        threshold = 0.05 * float(values.max())
    return values > threshold


class MatchTier(IntEnum):
    ASYMMETRIC = 1
    SPATIAL_SYM_TEMPORAL_ASYM = 2
    BIDIRECTIONAL = 3


@dataclass(frozen=True)
class BorderMatch:
    patch_a: int
    patch_b: int
    profile_a: int
    profile_b: int
    tier: MatchTier
    spatial_score: float  # the weaker of the two strip rho values
    temporal_score: float  # Pearson r over the joint active window; nan if undefined


def trace_correlation(
    trace_a: NDArray,
    trace_b: NDArray,
    min_common_active: int = MIN_COMMON_ACTIVE,
    restrict: Optional[NDArray] = None,
) -> Optional[float]:
    """Pearson correlation over the union of the traces' active windows.

    None when the window has fewer than ``min_common_active`` frames or
    either windowed trace is constant. ``restrict`` optionally limits the
    window to a boolean frame mask (activity is still judged on the full
    traces).
    """
    ta = np.asarray(trace_a, dtype=np.float64)
    tb = np.asarray(trace_b, dtype=np.float64)
    if ta.shape != tb.shape:
        raise ValueError("traces must have equal length")
    window = active_frames(ta) | active_frames(tb)
    if restrict is not None:
        window &= np.asarray(restrict, dtype=bool)
    if int(window.sum()) < min_common_active:
        return None
    xa, xb = ta[window], tb[window]
    if xa.std() == 0.0 or xb.std() == 0.0:
        return None
    return float(np.corrcoef(xa, xb)[0, 1])


def match_across_patches(
    a: Profile,
    trace_a: NDArray,
    rect_a: PatchRect,
    b: Profile,
    trace_b: NDArray,
    rect_b: PatchRect,
    profile_a: int = 0,
    profile_b: int = 0,
    tau_same: float = TAU_SAME,
    tau_glue: float = TAU_GLUE,
    tau_corr: float = TAU_CORR,
    min_common_active: int = MIN_COMMON_ACTIVE,
) -> Optional[BorderMatch]:
    """Score two profiles from adjacent patches; None when they do not match.

    Spatial tiers: symmetric when both strip rho values reach ``tau_same``,
    asymmetric when only the stronger direction does and the weaker one still
    reaches ``tau_glue``. A defined temporal correlation below ``tau_corr``
    rejects the match; an undefined one (fewer than ``min_common_active``
    jointly active frames, or a constant trace) caps the temporal evidence at
    asymmetric instead.
    """
    side_a = shared_side(rect_a, rect_b)
    if side_a is None:
        raise ValueError("patches are not adjacent")
    side_b = shared_side(rect_b, rect_a)
    assert side_b is not None
    pix_a, w_a = _strip_restriction(a, rect_a, side_a)
    pix_b, w_b = _strip_restriction(b, rect_b, side_b)
    if pix_a.size == 0 or pix_b.size == 0:
        return None  # one profile does not touch the shared border
    if np.intersect1d(pix_a, pix_b, assume_unique=True).size == 0:
        return None
    score = footprint_score(pix_a, w_a, pix_b, w_b)
    rho_ab = min(score.rho_ab, 1.0)
    rho_ba = min(score.rho_ba, 1.0)
    s_min, s_max = min(rho_ab, rho_ba), max(rho_ab, rho_ba)
    spatial_sym = s_min >= tau_same
    spatial_asym = not spatial_sym and s_max >= tau_same and s_min >= tau_glue
    if not (spatial_sym or spatial_asym):
        return None

    corr = trace_correlation(trace_a, trace_b, min_common_active)
    defined = corr is not None
    if defined and corr < tau_corr:
        return None
    if corr is None:
        corr = float("nan")

    if spatial_sym and defined:
        tier = MatchTier.BIDIRECTIONAL
    elif spatial_sym:
        tier = MatchTier.SPATIAL_SYM_TEMPORAL_ASYM
    else:
        tier = MatchTier.ASYMMETRIC
    return BorderMatch(
        patch_a=rect_a.index,
        patch_b=rect_b.index,
        profile_a=profile_a,
        profile_b=profile_b,
        tier=tier,
        spatial_score=s_min,
        temporal_score=corr,
    )


@dataclass(frozen=True)
class PatchResult:
    """Stable profiles and their traces from one patch pipeline."""

    rect: PatchRect
    profiles: Tuple[Profile, ...]
    traces: NDArray[np.float64]  # (n_profiles, n_frames)


def collect_matches(
    layout: PatchLayout,
    results: Mapping[int, PatchResult],
    tau_same: float = TAU_SAME,
    tau_glue: float = TAU_GLUE,
    tau_corr: float = TAU_CORR,
    min_common_active: int = MIN_COMMON_ACTIVE,
) -> List[BorderMatch]:
    """All border matches between every adjacent patch pair."""
    matches: List[BorderMatch] = []
    for rect_a, rect_b in layout.adjacent_pairs():
        res_a = results[rect_a.index]
        res_b = results[rect_b.index]
        for i, prof_a in enumerate(res_a.profiles):
            for j, prof_b in enumerate(res_b.profiles):
                m = match_across_patches(
                    prof_a,
                    res_a.traces[i],
                    rect_a,
                    prof_b,
                    res_b.traces[j],
                    rect_b,
                    profile_a=i,
                    profile_b=j,
                    tau_same=tau_same,
                    tau_glue=tau_glue,
                    tau_corr=tau_corr,
                    min_common_active=min_common_active,
                )
                if m is not None:
                    matches.append(m)
    return matches


def translate_pixels(
    pixels: NDArray[np.int64], rect: PatchRect, geometry: FrameGeometry
) -> NDArray[np.int64]:
    """Patch-local linear pixel indices to frame-coordinate linear indices."""
    rows = pixels // rect.width + rect.row0
    cols = pixels % rect.width + rect.col0
    return rows * geometry.width + cols


class _UnionFind:
    def __init__(self) -> None:
        self._parent: Dict[Tuple[int, int], Tuple[int, int]] = {}

    def add(self, key: Tuple[int, int]) -> None:
        self._parent.setdefault(key, key)

    def find(self, key: Tuple[int, int]) -> Tuple[int, int]:
        root = key
        while self._parent[root] != root:
            root = self._parent[root]
        while self._parent[key] != root:
            self._parent[key], key = root, self._parent[key]
        return root

    def union(self, a: Tuple[int, int], b: Tuple[int, int]) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return
        # deterministic: the smaller key becomes the root
        if rb < ra:
            ra, rb = rb, ra
        self._parent[rb] = ra


@dataclass(frozen=True)
class GluedProfile:
    profile_id: int
    pixels: NDArray[np.int64]  # frame-coordinate linear indices, sorted
    weights: NDArray[np.float64]
    trace: NDArray[np.float64]
    members: Tuple[Tuple[int, int], ...]  # (patch index, patch-local profile index)

    @property
    def area(self) -> int:
        return int(self.pixels.size)


def glue(
    matches: Sequence[BorderMatch],
    results: Mapping[int, PatchResult],
    layout: PatchLayout,
) -> List[GluedProfile]:
    """Union-find over matches; one global profile per connected cluster.

    Footprints are translated to frame coordinates and unioned with per-pixel
    max weights; the glued trace is the per-frame max of member traces.
    Output order (and hence profile ids) follows the smallest member key of
    each cluster, so ids are deterministic.
    """
    uf = _UnionFind()
    for idx, res in results.items():
        for local in range(len(res.profiles)):
            uf.add((idx, local))
    for m in matches:
        uf.union((m.patch_a, m.profile_a), (m.patch_b, m.profile_b))

    clusters: Dict[Tuple[int, int], List[Tuple[int, int]]] = {}
    for idx, res in sorted(results.items()):
        for local in range(len(res.profiles)):
            clusters.setdefault(uf.find((idx, local)), []).append((idx, local))

    n_frames = 0
    for res in results.values():
        if res.traces.size:
            n_frames = max(n_frames, res.traces.shape[1])

    out: List[GluedProfile] = []
    for root in sorted(clusters):
        members = sorted(clusters[root])
        all_pixels: List[NDArray[np.int64]] = []
        all_weights: List[NDArray[np.float64]] = []
        trace = np.zeros(n_frames, dtype=np.float64)
        for idx, local in members:
            res = results[idx]
            prof = res.profiles[local]
            all_pixels.append(translate_pixels(prof.pixels, res.rect, layout.geometry))
            all_weights.append(prof.weights)
            member_trace = np.asarray(res.traces[local], dtype=np.float64)
            np.maximum(trace[: member_trace.size], member_trace, out=trace[: member_trace.size])
        pix = np.concatenate(all_pixels)
        wts = np.concatenate(all_weights)
        union_pixels = np.unique(pix)
        union_weights = np.zeros(union_pixels.size, dtype=np.float64)
        np.maximum.at(union_weights, np.searchsorted(union_pixels, pix), wts)
        out.append(
            GluedProfile(
                profile_id=len(out),
                pixels=union_pixels,
                weights=union_weights,
                trace=trace,
                members=tuple(members),
            )
        )
    return out
