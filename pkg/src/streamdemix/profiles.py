"""Profile bookkeeping: temporaries, promotion, and merge/split adjudication.

New detections enter as temporary profiles and accrete footprint pixels
frame by frame. Once a temporary stops growing and has been active often
enough it is promoted to the stable set, where it is compared against every
overlapping stable profile: near-identical pairs merge, a dim profile
contained in a brighter one merges into it, and a bright contained profile
splits its container.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np
from numpy.typing import NDArray
from scipy import sparse

from .pipeline import CandidateProfile

K_TEMP = 0.75  # common-pixel fraction that merges two temporaries
UNIQUE_BORDER_FRACTION = 0.5
TAU_SAME = 0.9
TAU_INSIDE = 0.95
TAU_BRIGHT = 0.7
DEFAULT_QUIET_FRAMES = 5
DEFAULT_MIN_ACTIVE = 3
DEFAULT_MIN_AREA = 4


class ProfileState(Enum):
    TEMPORARY = "temporary"
    STABLE = "stable"


class Action(Enum):
    KEEP_SEPARATE = "keep_separate"
    MERGE = "merge"
    SPLIT = "split"


@dataclass
class Profile:
    """Weighted footprint plus activity bookkeeping.

    ``pixels`` holds sorted linear indices (row * width + col);
    ``last_active_frame`` is the last frame the footprint was updated and
    ``activity_count`` the number of distinct frames with any activity.
    """

    pixels: NDArray[np.int64]
    weights: NDArray[np.float64]
    state: ProfileState
    last_active_frame: int
    activity_count: int
    birth_frame: int = 0
    _counted_frame: int = field(default=-1, repr=False)

    def __post_init__(self) -> None:
        if self.pixels.size == 0:
            raise ValueError("profile footprint is empty")
        if np.any(self.weights <= 0):
            raise ValueError("profile weights must be positive")

    @property
    def area(self) -> int:
        return int(self.pixels.size)

    def bounding_box(self, width: int) -> Tuple[int, int, int, int]:
        rows = self.pixels // width
        cols = self.pixels % width
        return int(rows.min()), int(cols.min()), int(rows.max()), int(cols.max())

    def box_perimeter(self, width: int) -> int:
        r0, c0, r1, c1 = self.bounding_box(width)
        return 2 * ((r1 - r0 + 1) + (c1 - c0 + 1))


def from_candidate(candidate: CandidateProfile, width: int) -> Profile:
    idx = candidate.rows * width + candidate.cols
    order = np.argsort(idx)
    # activity_count starts at 0; the manager counts the birth frame itself
    return Profile(
        pixels=idx[order].astype(np.int64),
        weights=candidate.weights[order].astype(np.float64),
        state=ProfileState.TEMPORARY,
        last_active_frame=candidate.birth_frame,
        activity_count=0,
        birth_frame=candidate.birth_frame,
    )


@dataclass(frozen=True)
class MergeStats:
    """Pixel-count overlap summary of two footprints."""

    p1: int
    p2: int
    u1: int
    u2: int
    c: int
    b1: int
    b2: int

    @classmethod
    def from_profiles(cls, a: Profile, b: Profile, width: int) -> "MergeStats":
        common = np.intersect1d(a.pixels, b.pixels, assume_unique=True)
        c = int(common.size)
        return cls(
            p1=a.area, p2=b.area,
            u1=a.area - c, u2=b.area - c, c=c,
            b1=a.box_perimeter(width), b2=b.box_perimeter(width),
        )


def merge_stats_pass(s: MergeStats) -> bool:
    """True when either profile adds only a thin rim to the other or most
    of the smaller footprint is shared."""
    if s.u1 <= UNIQUE_BORDER_FRACTION * s.b1 or s.u2 <= UNIQUE_BORDER_FRACTION * s.b2:
        return True
    return s.c >= K_TEMP * min(s.p1, s.p2)


def temp_merge_test(a: Profile, b: Profile, width: int) -> bool:
    """Decide whether two temporary footprints describe the same cell."""
    return merge_stats_pass(MergeStats.from_profiles(a, b, width))


def merge_profiles(a: Profile, b: Profile) -> Profile:
    """Union footprint with per-pixel max weight; counters keep the max."""
    pixels = np.union1d(a.pixels, b.pixels)
    weights = np.zeros(pixels.size)
    pos_a = np.searchsorted(pixels, a.pixels)
    pos_b = np.searchsorted(pixels, b.pixels)
    weights[pos_a] = a.weights
    np.maximum.at(weights, pos_b, b.weights)
    state = ProfileState.STABLE if ProfileState.STABLE in (a.state, b.state) else ProfileState.TEMPORARY
    return Profile(
        pixels=pixels,
        weights=weights,
        state=state,
        last_active_frame=max(a.last_active_frame, b.last_active_frame),
        activity_count=max(a.activity_count, b.activity_count),
        birth_frame=min(a.birth_frame, b.birth_frame),
    )


@dataclass(frozen=True)
class PairScore:
    """Containment scores: rho close to 1 means the row profile fits inside
    the other, judged by comparing full-footprint and overlap-restricted
    regression coefficients."""

    alpha_ab: float
    alpha_ba: float
    beta_ab: float
    beta_ba: float
    rho_ab: float
    rho_ba: float


def pair_score(a: Profile, b: Profile) -> PairScore:
    """Compute alpha, beta and rho both ways from footprint inner products."""
    return footprint_score(a.pixels, a.weights, b.pixels, b.weights)


def footprint_score(
    pixels_a: np.ndarray,
    weights_a: np.ndarray,
    pixels_b: np.ndarray,
    weights_b: np.ndarray,
) -> PairScore:
    """Pair score over raw (sorted unique index, weight) footprints.

    Works on any shared index space, e.g. whole-frame pixels or the
    1-D coordinate along a patch border strip.
    """
    common, pos_a, pos_b = np.intersect1d(pixels_a, pixels_b, assume_unique=True, return_indices=True)
    if common.size == 0:
        raise ValueError("degenerate overlap: footprints share no pixels")
    all_a = np.asarray(weights_a, dtype=np.float64)
    all_b = np.asarray(weights_b, dtype=np.float64)
    wa, wb = all_a[pos_a], all_b[pos_b]
    ab = float(wa @ wb)  # <A, B> has support only on the overlap
    aa = float(all_a @ all_a)
    bb = float(all_b @ all_b)
    aa_ol = float(wa @ wa)
    bb_ol = float(wb @ wb)
    alpha_ab = ab / aa
    alpha_ba = ab / bb
    beta_ab = ab / aa_ol
    beta_ba = ab / bb_ol
    return PairScore(
        alpha_ab=alpha_ab, alpha_ba=alpha_ba,
        beta_ab=beta_ab, beta_ba=beta_ba,
        rho_ab=alpha_ab / beta_ab, rho_ba=alpha_ba / beta_ba,
    )


def overlap_brightness_ratio(contained: Profile, container: Profile) -> float:
    """Mean footprint weight of the contained profile over the overlap,
    relative to the container's."""
    _, pos_in, pos_out = np.intersect1d(
        contained.pixels, container.pixels, assume_unique=True, return_indices=True
    )
    if pos_in.size == 0:
        raise ValueError("degenerate overlap: footprints share no pixels")
    return float(contained.weights[pos_in].mean() / container.weights[pos_out].mean())


def stable_adjudicate(
    a: Profile,
    b: Profile,
    score: PairScore,
    brightness_ratio: Optional[float] = None,
    tau_same: float = TAU_SAME,
    tau_inside: float = TAU_INSIDE,
    tau_bright: float = TAU_BRIGHT,
) -> Action:
    """Decide between keeping, merging or splitting an overlapping pair.

    ``brightness_ratio`` is contained-over-container; when omitted it is
    computed from footprint weights (callers tracking recent activation
    amplitudes may pass their own ratio instead).
    """
    rho_ab = min(score.rho_ab, 1.0)
    rho_ba = min(score.rho_ba, 1.0)
    if rho_ab >= tau_same and rho_ba >= tau_same:
        return Action.MERGE
    if max(rho_ab, rho_ba) >= tau_inside and min(rho_ab, rho_ba) < tau_same:
        contained, container = (a, b) if rho_ab >= rho_ba else (b, a)
        ratio = brightness_ratio
        if ratio is None:
            ratio = overlap_brightness_ratio(contained, container)
        return Action.MERGE if ratio < tau_bright else Action.SPLIT
    return Action.KEEP_SEPARATE


def split_profiles(container: Profile, contained: Profile, min_area: int = DEFAULT_MIN_AREA) -> List[Profile]:
    """Keep the contained profile; the container keeps only its remainder."""
    keep = replace(contained)
    remainder_idx = np.setdiff1d(container.pixels, contained.pixels, assume_unique=True)
    if remainder_idx.size < max(1, min_area):
        return [keep]
    pos = np.searchsorted(container.pixels, remainder_idx)
    remainder = replace(container, pixels=remainder_idx, weights=container.weights[pos])
    return [keep, remainder]


@dataclass(frozen=True)
class ManagerEvent:
    """One structural change to the profile sets."""

    kind: str  # "promote", "discard", "merge", "split"
    sources: Tuple[int, ...]
    results: Tuple[int, ...]


class ProfileManager:
    """Owns the temporary and stable profile sets of one patch."""

    def __init__(
        self,
        width: int,
        height: int,
        quiet_frames: int = DEFAULT_QUIET_FRAMES,
        min_active: int = DEFAULT_MIN_ACTIVE,
        tau_same: float = TAU_SAME,
        tau_inside: float = TAU_INSIDE,
        tau_bright: float = TAU_BRIGHT,
        min_area: int = DEFAULT_MIN_AREA,
    ) -> None:
        self.width = width
        self.height = height
        self.quiet_frames = quiet_frames
        self.min_active = min_active
        self.tau_same = tau_same
        self.tau_inside = tau_inside
        self.tau_bright = tau_bright
        self.min_area = min_area
        self.temps: Dict[int, Profile] = {}
        self.stables: Dict[int, Profile] = {}
        self._next_id = 0

    def _new_id(self) -> int:
        self._next_id += 1
        return self._next_id - 1

    def add_candidate(self, candidate: CandidateProfile, frame: int) -> int:
        """Merge a detection into the temporaries, growing footprints.

        Returns the id of the temporary that absorbed the detection.
        """
        incoming = from_candidate(candidate, self.width)
        incoming.last_active_frame = frame
        merged_ids: List[int] = []
        while True:
            hit = None
            for tid, temp in self.temps.items():
                if self._overlaps(temp, incoming) and temp_merge_test(temp, incoming, self.width):
                    hit = tid
                    break
            if hit is None:
                break
            absorbed = self.temps.pop(hit)
            count = max(absorbed.activity_count, incoming.activity_count)
            incoming = merge_profiles(absorbed, incoming)
            incoming.activity_count = count
            incoming._counted_frame = max(absorbed._counted_frame, incoming._counted_frame)
            merged_ids.append(hit)
        incoming.last_active_frame = frame
        if incoming._counted_frame != frame:
            incoming.activity_count += 1
            incoming._counted_frame = frame
        tid = merged_ids[0] if merged_ids else self._new_id()
        self.temps[tid] = incoming
        return tid

    def mark_activity(self, temp_id: int, frame: int) -> None:
        """Record supra-threshold activation without footprint growth."""
        temp = self.temps[temp_id]
        if temp._counted_frame != frame:
            temp.activity_count += 1
            temp._counted_frame = frame

    def stale_ids(self, current_frame: int) -> List[int]:
        """Temporaries whose footprint has not grown for ``quiet_frames``."""
        return [
            t for t, p in self.temps.items()
            if current_frame - p.last_active_frame >= self.quiet_frames
        ]

    def absorb_temp(self, temp_id: int, stable_id: int) -> ManagerEvent:
        """Fold a temporary into an existing stable profile, keeping its id.

        Used when outside evidence (e.g. trace correlation) says the
        temporary is the stable cell's own unexplained residue rather than a
        new cell; the stable footprint grows by the temporary's pixels.
        """
        temp = self.temps.pop(temp_id)
        stable = self.stables[stable_id]
        self.stables[stable_id] = merge_profiles(stable, temp)
        return ManagerEvent(kind="merge", sources=(temp_id, stable_id), results=(stable_id,))

    def absorb_stable(self, residue_id: int, host_id: int) -> ManagerEvent:
        """Fold one stable profile into another, keeping the host id.

        Used when outside evidence says the smaller stable is the host
        cell's residue that was promoted before the host itself existed; the
        host footprint grows by the residue's pixels.
        """
        residue = self.stables.pop(residue_id)
        host = self.stables[host_id]
        self.stables[host_id] = merge_profiles(residue, host)
        return ManagerEvent(kind="merge", sources=(residue_id, host_id), results=(host_id,))

    def reweight_stable(self, stable_id: int, weights: NDArray[np.float64]) -> None:
        """Replace a stable profile's weights, dropping pixels that reach zero.

        ``weights`` must align with the profile's current pixel order. The
        call is a no-op when every weight would vanish, so a destructive
        update can never empty a footprint.
        """
        self.stables[stable_id] = self._reweighted(self.stables[stable_id], weights)

    def reweight_temp(self, temp_id: int, weights: NDArray[np.float64]) -> None:
        """Replace a temporary profile's weights, dropping pixels that reach zero."""
        self.temps[temp_id] = self._reweighted(self.temps[temp_id], weights)

    @staticmethod
    def _reweighted(profile: Profile, weights: NDArray[np.float64]) -> Profile:
        if weights.shape != profile.weights.shape:
            raise ValueError("weights do not match the profile footprint")
        keep = weights > 0
        if not np.any(keep):
            return profile
        return replace(profile, pixels=profile.pixels[keep], weights=weights[keep])

    def promote_stale(self, current_frame: int) -> List[ManagerEvent]:
        """Promote quiet temporaries with enough activity; discard the rest.

        A temporary is quiet when its footprint has not grown for
        ``quiet_frames`` frames. Promotion adjudicates the newcomer against
        all overlapping stable profiles, re-entering merge and split results
        until no action applies.
        """
        events: List[ManagerEvent] = []
        for tid in self.stale_ids(current_frame):
            temp = self.temps.pop(tid)
            if temp.activity_count < self.min_active:
                events.append(ManagerEvent(kind="discard", sources=(tid,), results=()))
                continue
            promoted = replace(temp, state=ProfileState.STABLE)
            events.extend(self._insert_stable(promoted, origin=tid))
        return events

    def _overlaps(self, a: Profile, b: Profile) -> bool:
        return bool(np.intersect1d(a.pixels, b.pixels, assume_unique=True).size)

    def _insert_stable(self, profile: Profile, origin: Optional[int]) -> List[ManagerEvent]:
        events: List[ManagerEvent] = []
        stack: List[Tuple[Profile, Optional[int]]] = [(profile, origin)]
        while stack:
            current, source = stack.pop()
            acted = False
            for sid, stable in list(self.stables.items()):
                if not self._overlaps(current, stable):
                    continue
                score = pair_score(current, stable)
                action = stable_adjudicate(
                    current, stable, score,
                    tau_same=self.tau_same, tau_inside=self.tau_inside, tau_bright=self.tau_bright,
                )
                if action is Action.MERGE:
                    del self.stables[sid]
                    merged = merge_profiles(current, stable)
                    events.append(ManagerEvent(kind="merge", sources=self._srcs(source, sid), results=()))
                    stack.append((merged, sid))
                    acted = True
                    break
                if action is Action.SPLIT:
                    rho_cs = min(score.rho_ab, 1.0)
                    rho_sc = min(score.rho_ba, 1.0)
                    contained, container = (current, stable) if rho_cs >= rho_sc else (stable, current)
                    del self.stables[sid]
                    pieces = split_profiles(container, contained, self.min_area)
                    events.append(ManagerEvent(kind="split", sources=self._srcs(source, sid), results=()))
                    for piece in pieces:
                        stack.append((piece, sid))
                    acted = True
                    break
            if not acted:
                new_id = self._new_id()
                self.stables[new_id] = current
                events.append(
                    ManagerEvent(kind="promote", sources=self._srcs(source), results=(new_id,))
                )
        return events

    @staticmethod
    def _srcs(*ids: Optional[int]) -> Tuple[int, ...]:
        return tuple(i for i in ids if i is not None)


def build_matrix(profiles: List[Profile], n_pixels: int) -> Tuple[sparse.csc_matrix, NDArray[np.float64]]:
    """Stack profiles as unit-norm sparse columns; returns (matrix, norms).

    Activations produced against the normalized columns multiply by the
    returned norms to recover raw-weight units.
    """
    if not profiles:
        return sparse.csc_matrix((n_pixels, 0)), np.zeros(0)
    data, indices, indptr, norms = [], [], [0], []
    for p in profiles:
        norm = float(np.linalg.norm(p.weights))
        norms.append(norm)
        data.append(p.weights / norm)
        indices.append(p.pixels)
        indptr.append(indptr[-1] + p.area)
    mat = sparse.csc_matrix(
        (np.concatenate(data), np.concatenate(indices), np.array(indptr)),
        shape=(n_pixels, len(profiles)),
    )
    return mat, np.array(norms)
