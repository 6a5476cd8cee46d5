"""Streaming demixing engine.

Each patch owns an independent pipeline that runs the per-frame loop:
denoise, solve the known (stable) profiles robustly, report their
activations, solve the robust residual against the temporary profiles,
report early detections, then threshold the remaining residual to grow or
create temporaries, and finally promote temporaries that stopped growing.
Patches are processed behind a per-frame barrier; a snapshot glues profiles
across patch borders into one global set.

Brightness-dependent thresholds are derived from the per-frame noise level,
so decisions are invariant under rescaling of the input video.
"""

from __future__ import annotations

import logging
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Deque, Dict, List, Optional, Sequence, Set, Tuple

import numpy as np
from numpy.typing import NDArray
from scipy import ndimage

from .config import EngineConfig
from .model import FrameGeometry, SeudoProblem, build_kernel_grid, kernel_matrix, seudo_solve
from .patches import (
    GluedProfile,
    PatchLayout,
    PatchRect,
    PatchResult,
    collect_matches,
    glue,
    partition,
)
from .pipeline import DenoiseConfig, NoiseMap, denoise, detect_components, estimate_noise
from .profiles import Profile, ProfileManager, build_matrix

logger = logging.getLogger(__name__)

# a temporary counts as an overlapping stable's residue when (a) most of its
# detection frames fall inside the stable's active window and (b) most of its
# pixels hug the stable footprint (lie within a small dilation of it); a
# genuinely new neighbour extends away from the boundary and fails (b)
GRAFT_CONTAINMENT = 0.75
GRAFT_HALO = 0.6
GRAFT_DILATION_RADIUS = 2
# a stable counts as "on" for residue attribution above this fraction of its
# peak activation; noise-relative windows misjudge young or busy traces
GRAFT_ACTIVE_FRACTION = 0.2

# damping for the per-frame footprint refit step and the brightness (in
# noise-level units) a stable must reach before its weights are updated;
# the level is a half-range, so 1.0 is already ~3 gaussian sigmas
REFINE_ETA = 0.25
REFINE_MIN_BRIGHTNESS = 1.0
REFINE_WEIGHT_FLOOR = 0.02


@dataclass(frozen=True)
class DetectionEvent:
    """One activation report: stable profiles every frame, temporaries early."""

    frame_index: int
    profile_id: int
    activation: float  # peak-pixel brightness units
    kind: str  # "stable" or "early"


@dataclass(frozen=True)
class FrameFailure:
    frame_index: int
    patch_index: int
    error: str


@dataclass
class _PatchOutput:
    stable_events: List[Tuple[int, float]] = field(default_factory=list)
    early_events: List[Tuple[int, float]] = field(default_factory=list)


def _noise_sections(height: int, width: int, requested: Tuple[int, int]) -> Tuple[int, int]:
    """Shrink the section grid for small patches; sections need 16 pixels."""
    rows = max(1, min(requested[0], height // 4))
    cols = max(1, min(requested[1], width // 4))
    if (height // rows) * (width // cols) < 16:
        return (1, 1)
    return (rows, cols)


class PatchPipeline:
    """Per-patch state: profile sets, solver warm starts, and trace history."""

    def __init__(self, rect: PatchRect, config: EngineConfig) -> None:
        self.rect = rect
        self.config = config
        self.geometry = rect.geometry
        self.manager = ProfileManager(
            width=rect.width,
            height=rect.height,
            quiet_frames=config.quiet_frames,
            min_active=config.min_active,
            tau_same=config.tau_same,
            tau_inside=config.tau_inside,
            tau_bright=config.tau_bright,
            min_area=config.min_area,
        )
        grid = build_kernel_grid(
            self.geometry, config.kernel_radius, config.kernel_stride, config.kernel_sigma
        )
        self.bumps = kernel_matrix(self.geometry, grid)
        self.sections = _noise_sections(rect.height, rect.width, config.noise_sections)
        self._median_floor: Optional[NDArray[np.float64]] = None
        self._sigma_floor: Optional[NDArray[np.float64]] = None
        self.window: Deque[NDArray[np.float64]] = deque(maxlen=config.denoise_window)
        self.denoise_config = DenoiseConfig(
            spatial_sigma=config.denoise_sigma, window=config.denoise_window
        )
        self.traces: Dict[int, List[float]] = {}
        self.temp_traces: Dict[int, List[float]] = {}
        self.temp_detections: Dict[int, Set[int]] = {}
        self.temp_activations: Dict[int, Set[int]] = {}
        self.reported_temps: Set[int] = set()
        self._stable_warm: Optional[NDArray[np.float64]] = None
        self._stable_key: Tuple[int, ...] = ()
        self._temp_warm: Optional[NDArray[np.float64]] = None
        self._temp_key: Tuple[int, ...] = ()

    @staticmethod
    def _brightness_scales(profiles: Sequence[Profile]) -> NDArray[np.float64]:
        """Per-profile factor turning a unit-norm activation into peak brightness."""
        if not profiles:
            return np.zeros(0)
        return np.array([p.weights.max() / np.linalg.norm(p.weights) for p in profiles])

    def _update_noise(self, den: NDArray[np.float64]) -> NoiseMap:
        """Track the running minimum of the background and noise fields.

        Transient fluorescence can only inflate a section's median and
        half-range, so the elementwise minimum over time converges to the
        signal-free estimate and stays there while cells fire.
        """
        now = estimate_noise(den, self.sections)
        if self._median_floor is None:
            self._median_floor = now.median
            self._sigma_floor = now.sigma_half
        else:
            self._median_floor = np.minimum(self._median_floor, now.median)
            self._sigma_floor = np.minimum(self._sigma_floor, now.sigma_half)
        return NoiseMap(
            median=self._median_floor,
            sigma_half=self._sigma_floor,
            section_grid=now.section_grid,
        )

    def _solve(
        self,
        y: NDArray[np.float64],
        ids: List[int],
        profiles: List[Profile],
        lam: float,
        gamma: float,
        warm_key_attr: str,
        warm_attr: str,
    ) -> Tuple[NDArray[np.float64], NDArray[np.float64]]:
        """Robust solve against the given profiles; returns (phi, robust residual)."""
        X, _ = build_matrix(profiles, self.geometry.n_pixels)
        problem = SeudoProblem(
            y=y, geometry=self.geometry, X=X, W=self.bumps, lam=lam, gamma=gamma
        )
        key = tuple(ids)
        warm = getattr(self, warm_attr) if getattr(self, warm_key_attr) == key else None
        solution = seudo_solve(
            problem,
            warm_start=warm,
            max_iter=self.config.solver_max_iter,
            tol=self.config.solver_tol,
        )
        setattr(self, warm_key_attr, key)
        setattr(self, warm_attr, np.concatenate([solution.phi, solution.c]))
        robust_residual = y - (X @ solution.phi if profiles else 0.0)
        return solution.phi, robust_residual

    def process(self, subframe: NDArray[np.float64], frame_index: int) -> _PatchOutput:
        out = _PatchOutput()
        self.window.append(np.array(subframe, dtype=np.float64))
        den = denoise(list(self.window), self.denoise_config)
        noise = self._update_noise(den)
        sigma_bar = float(noise.sigma_half.mean())
        lam = self.config.lam * sigma_bar
        gamma = self.config.gamma_scale * self.geometry.n_pixels * sigma_bar**2
        gamma_detect = self.config.gamma_detect_scale * sigma_bar
        y = (den - noise.median).ravel()

        stable_ids = sorted(self.manager.stables)
        stable_profiles = [self.manager.stables[i] for i in stable_ids]
        phi, residual = self._solve(
            y, stable_ids, stable_profiles, lam, gamma, "_stable_key", "_stable_warm"
        )
        brightness = phi * self._brightness_scales(stable_profiles)
        for sid, value in zip(stable_ids, brightness):
            self.traces.setdefault(sid, [0.0] * frame_index).append(float(value))
            if value > 0:
                out.stable_events.append((sid, float(value)))
        self._refine_footprints("stable", stable_ids, phi, residual, sigma_bar)

        temp_ids = sorted(self.manager.temps)
        temp_profiles = [self.manager.temps[i] for i in temp_ids]
        phi_t, residual2 = self._solve(
            residual, temp_ids, temp_profiles, lam, gamma, "_temp_key", "_temp_warm"
        )
        temp_brightness = phi_t * self._brightness_scales(temp_profiles)
        self.reported_temps &= set(temp_ids)
        for tid, value in zip(temp_ids, temp_brightness):
            self.temp_traces.setdefault(tid, [0.0] * frame_index).append(float(value))
            if value > gamma_detect:
                out.early_events.append((tid, float(value)))
                self.reported_temps.add(tid)
                self.manager.mark_activity(tid, frame_index)
                self.temp_activations.setdefault(tid, set()).add(frame_index)
            elif tid in self.reported_temps and value > 0:
                out.early_events.append((tid, float(value)))

        detection_noise = NoiseMap(
            median=np.zeros_like(noise.median),
            sigma_half=noise.sigma_half,
            section_grid=noise.section_grid,
        )
        candidates = detect_components(
            residual2.reshape(self.rect.height, self.rect.width),
            detection_noise,
            k_sigma=self.config.k_sigma,
            min_area=self.config.min_area,
            birth_frame=frame_index,
        )
        for candidate in candidates:
            tid = self.manager.add_candidate(candidate, frame_index)
            self.temp_detections.setdefault(tid, set()).add(frame_index)

        self._graft_residue_temps(frame_index)
        removed = {
            sid: (self.manager.stables[sid].pixels, self.traces.get(sid))
            for sid in stable_ids
        }
        events = self.manager.promote_stale(frame_index)
        if events:
            self._update_traces(events, removed, frame_index)
            if any(event.kind == "promote" for event in events):
                self._graft_residue_stables()
        for tid in [t for t in self.temp_traces if t not in self.manager.temps]:
            del self.temp_traces[tid]
        for tid in [t for t in self.temp_detections if t not in self.manager.temps]:
            del self.temp_detections[tid]
        for tid in [t for t in self.temp_activations if t not in self.manager.temps]:
            del self.temp_activations[tid]
        return out

    def _refine_footprints(
        self,
        kind: str,
        ids: List[int],
        phi: NDArray[np.float64],
        residual: NDArray[np.float64],
        sigma_bar: float,
    ) -> None:
        """Nudge active footprints toward the least-squares refit.

        Detected weights inherit the shape of whatever residue birthed them,
        which flattens a footprint as detections merge; a damped coordinate
        step on the fit residual restores the cell's profile and frees the
        rim energy that would otherwise keep re-detecting as duplicates.
        """
        pool = self.manager.stables if kind == "stable" else self.manager.temps
        reweight = (
            self.manager.reweight_stable if kind == "stable" else self.manager.reweight_temp
        )
        for k, pid in enumerate(ids):
            profile = pool[pid]
            raw = phi[k] / float(np.linalg.norm(profile.weights))
            if raw * profile.weights.max() <= REFINE_MIN_BRIGHTNESS * sigma_bar:
                continue
            step = residual[profile.pixels] / raw
            updated = profile.weights + REFINE_ETA * step
            # keep over-weighted pixels at a negligible floor instead of
            # dropping them; energy-weighted overlap scores ignore them
            floor = REFINE_WEIGHT_FLOOR * float(updated.max())
            if floor <= 0:
                continue
            reweight(pid, np.maximum(updated, floor))

    def _graft_residue_temps(self, frame_index: int) -> None:
        """Absorb quiet temporaries that are an active stable's own residue.

        A temporary detected only while an overlapping stable profile is
        active is that cell's unexplained halo (the stored footprint was too
        small), not a new cell; its pixels extend the stable instead of
        becoming a duplicate. A genuinely new cell earns detections during
        its own transients, when the stable is mostly quiet.
        """
        if not self.manager.stables:
            return
        for tid in self.manager.stale_ids(frame_index):
            temp = self.manager.temps[tid]
            if temp.activity_count < self.manager.min_active:
                continue  # will be discarded, not promoted; nothing to pre-empt
            evidence = sorted(
                self.temp_detections.get(tid, set()) | self.temp_activations.get(tid, set())
            )
            if not evidence:
                continue
            t_box = temp.bounding_box(self.rect.width)
            best_sid = None
            best_affinity = 0.0
            for sid in sorted(self.manager.stables):
                stable = self.manager.stables[sid]
                s_box = stable.bounding_box(self.rect.width)
                gap = max(
                    s_box[0] - t_box[2], t_box[0] - s_box[2],
                    s_box[1] - t_box[3], t_box[1] - s_box[3],
                )
                if gap > GRAFT_DILATION_RADIUS:
                    continue
                affinity = self._halo_affinity(temp, stable)
                if affinity < GRAFT_HALO:
                    continue  # extends away from the boundary: a neighbour, not a halo
                trace = np.array(self.traces.get(sid, ()))
                if trace.size == 0 or trace.max() <= 0:
                    continue
                on = trace > GRAFT_ACTIVE_FRACTION * trace.max()
                inside = [f for f in evidence if f < on.size and on[f]]
                if len(inside) / len(evidence) < GRAFT_CONTAINMENT:
                    continue
                if affinity > best_affinity:
                    best_sid, best_affinity = sid, affinity
            if best_sid is not None:
                self.manager.absorb_temp(tid, best_sid)

    def _halo_affinity(self, probe: Profile, anchor: Profile) -> float:
        """Fraction of the probe's pixels within a dilation of the anchor."""
        height, width = self.rect.height, self.rect.width
        mask = np.zeros((height, width), dtype=bool)
        mask[anchor.pixels // width, anchor.pixels % width] = True
        grown = ndimage.binary_dilation(
            mask, structure=np.ones((3, 3), dtype=bool), iterations=GRAFT_DILATION_RADIUS
        )
        return float(grown[probe.pixels // width, probe.pixels % width].mean())

    def _graft_residue_stables(self) -> None:
        """Absorb a stable profile that is a larger stable's own residue.

        The residue of a cell's first transients can go quiet and be
        promoted before the cell's full footprint is, so the halo test for
        temporaries never saw the pair together. The same evidence applies
        after the fact: a small stable hugging a larger one and active only
        inside the larger one's active windows is residue, not a neighbour.
        """
        absorbed = True
        while absorbed:
            absorbed = False
            for rid in sorted(self.manager.stables):
                residue = self.manager.stables[rid]
                r_trace = np.array(self.traces.get(rid, ()))
                if r_trace.size == 0 or r_trace.max() <= 0:
                    continue
                r_on = r_trace > GRAFT_ACTIVE_FRACTION * r_trace.max()
                r_box = residue.bounding_box(self.rect.width)
                best_hid = None
                best_affinity = 0.0
                for hid in sorted(self.manager.stables):
                    if hid == rid:
                        continue
                    host = self.manager.stables[hid]
                    if host.area <= residue.area:
                        continue
                    h_box = host.bounding_box(self.rect.width)
                    gap = max(
                        h_box[0] - r_box[2], r_box[0] - h_box[2],
                        h_box[1] - r_box[3], r_box[1] - h_box[3],
                    )
                    if gap > GRAFT_DILATION_RADIUS:
                        continue
                    affinity = self._halo_affinity(residue, host)
                    if affinity < GRAFT_HALO:
                        continue
                    h_trace = np.array(self.traces.get(hid, ()))
                    if h_trace.size == 0 or h_trace.max() <= 0:
                        continue
                    h_on = h_trace > GRAFT_ACTIVE_FRACTION * h_trace.max()
                    n = min(r_on.size, h_on.size)
                    joint = int(np.sum(r_on[:n] & h_on[:n]))
                    if joint / int(r_on.sum()) < GRAFT_CONTAINMENT:
                        continue
                    if affinity > best_affinity:
                        best_hid, best_affinity = hid, affinity
                if best_hid is None:
                    continue
                self.manager.absorb_stable(rid, best_hid)
                host_trace = np.array(self.traces.get(best_hid, ()))
                n = min(r_trace.size, host_trace.size)
                merged = np.maximum(r_trace[:n], host_trace[:n])
                tail = r_trace[n:] if r_trace.size > n else host_trace[n:]
                self.traces[best_hid] = np.concatenate([merged, tail]).tolist()
                del self.traces[rid]
                absorbed = True
                break

    def _update_traces(
        self,
        events,
        before: Dict[int, Tuple[NDArray[np.int64], Optional[List[float]]]],
        frame_index: int,
    ) -> None:
        """Keep trace history consistent with structural profile changes.

        New stable profiles inherit the per-frame max of the origin
        temporary's activation history and the traces of any replaced stable
        profiles their footprint overlaps; brand-new cells start from zeros.
        """
        length = frame_index + 1
        gone = [sid for sid in before if sid not in self.manager.stables]

        def pad(values: List[float]) -> NDArray[np.float64]:
            out = np.zeros(length)
            out[: len(values)] = values[:length]
            return out

        # Adjudication may chain merges and splits through ids that no longer
        # exist by the time the batch returns; replay the events in order,
        # carrying each intermediate id's combined history forward.
        staged: Dict[int, NDArray[np.float64]] = {}

        def lookup(pid: int) -> NDArray[np.float64]:
            if pid in staged:
                return staged[pid]
            if pid in self.temp_traces:
                return pad(self.temp_traces[pid])
            if pid in before and before[pid][1] is not None:
                return pad(before[pid][1])
            return np.zeros(length)

        for event in events:
            if event.kind in ("merge", "split") and len(event.sources) == 2:
                src, sid = event.sources
                staged[sid] = np.maximum(lookup(src), lookup(sid))
            elif event.kind == "promote":
                base = lookup(event.sources[0]) if event.sources else np.zeros(length)
                for rid in event.results:
                    staged[rid] = base

        for sid in list(self.traces):
            if sid not in self.manager.stables:
                del self.traces[sid]

        for event in events:
            if event.kind != "promote":
                continue
            for rid in event.results:
                if rid not in self.manager.stables:
                    continue
                trace = staged[rid].copy()
                pixels = self.manager.stables[rid].pixels
                for old in gone:
                    old_pixels, old_trace = before[old]
                    if old_trace is None:
                        continue
                    if np.intersect1d(pixels, old_pixels, assume_unique=True).size:
                        np.maximum(trace, pad(old_trace), out=trace)
                self.traces[rid] = trace.tolist()

    def result(self, n_frames: int) -> PatchResult:
        """Current stable profiles and zero-padded traces for gluing."""
        ids = sorted(self.manager.stables)
        profiles = tuple(self.manager.stables[i] for i in ids)
        traces = np.zeros((len(ids), n_frames))
        for row, sid in enumerate(ids):
            history = self.traces.get(sid, [])
            traces[row, : len(history)] = history[:n_frames]
        return PatchResult(rect=self.rect, profiles=profiles, traces=traces)

    @property
    def stable_ids(self) -> List[int]:
        return sorted(self.manager.stables)


@dataclass(frozen=True)
class EngineSnapshot:
    """Immutable global view: glued profiles with frame-coordinate footprints."""

    profiles: Tuple[GluedProfile, ...]
    geometry: FrameGeometry
    n_frames: int

    @property
    def traces(self) -> NDArray[np.float64]:
        if not self.profiles:
            return np.zeros((0, self.n_frames))
        return np.stack([p.trace for p in self.profiles])


class Engine:
    """Frame-synchronous streaming engine over a patch grid."""

    def __init__(self, config: EngineConfig, geometry: FrameGeometry) -> None:
        self.config = config
        self.geometry = geometry
        self.layout: PatchLayout = partition(geometry, config.patch_size, config.margin)
        self.pipelines = [PatchPipeline(rect, config) for rect in self.layout.patches]
        self.frame_index = 0
        self.failures: List[FrameFailure] = []
        self._consecutive_failures = 0
        self._global_ids: Dict[Tuple[int, int], int] = {}
        self._executor = (
            ThreadPoolExecutor(max_workers=config.threads) if config.threads > 1 else None
        )
        self._closed = False

    def _global_id(self, patch_index: int, local_id: int) -> int:
        key = (patch_index, local_id)
        if key not in self._global_ids:
            self._global_ids[key] = len(self._global_ids)
        return self._global_ids[key]

    def push_frame(self, frame: NDArray) -> List[DetectionEvent]:
        """Process one frame through every patch; returns this frame's events."""
        if self._closed:
            raise RuntimeError("engine is closed")
        frame = np.asarray(frame, dtype=np.float64)
        expected = (self.geometry.height, self.geometry.width)
        if frame.shape != expected:
            raise ValueError(f"frame shape {frame.shape} does not match geometry {expected}")

        t = self.frame_index
        outputs: List[Optional[_PatchOutput]] = [None] * len(self.pipelines)
        failed: Optional[FrameFailure] = None

        def run(i: int) -> _PatchOutput:
            return self.pipelines[i].process(self.pipelines[i].rect.subframe(frame), t)

        if self._executor is not None:
            futures = [self._executor.submit(run, i) for i in range(len(self.pipelines))]
            for i, future in enumerate(futures):
                try:
                    outputs[i] = future.result()
                except Exception as exc:  # noqa: BLE001 - worker errors skip the frame
                    failed = FrameFailure(t, i, repr(exc))
        else:
            for i in range(len(self.pipelines)):
                try:
                    outputs[i] = run(i)
                except Exception as exc:  # noqa: BLE001
                    failed = FrameFailure(t, i, repr(exc))
                    break

        self.frame_index += 1
        if failed is not None:
            logger.warning(
                "frame %d failed in patch %d: %s", failed.frame_index, failed.patch_index, failed.error
            )
            self.failures.append(failed)
            self._consecutive_failures += 1
            if self._consecutive_failures > self.config.max_consecutive_failures:
                raise RuntimeError(
                    f"aborting after {self._consecutive_failures} consecutive frame failures"
                )
            return []
        self._consecutive_failures = 0

        events: List[DetectionEvent] = []
        for i, output in enumerate(outputs):
            assert output is not None
            for lid, value in output.stable_events:
                events.append(DetectionEvent(t, self._global_id(i, lid), value, "stable"))
            for lid, value in output.early_events:
                events.append(DetectionEvent(t, self._global_id(i, lid), value, "early"))
        return events

    @property
    def n_stable_profiles(self) -> int:
        return sum(len(p.manager.stables) for p in self.pipelines)

    def snapshot(self) -> EngineSnapshot:
        """Glue per-patch stable profiles into the global set."""
        results = {
            pipe.rect.index: pipe.result(self.frame_index) for pipe in self.pipelines
        }
        matches = collect_matches(
            self.layout,
            results,
            tau_same=self.config.tau_same,
            tau_glue=self.config.tau_glue,
            tau_corr=self.config.tau_corr,
            min_common_active=self.config.min_common_active,
        )
        glued = glue(matches, results, self.layout)
        return EngineSnapshot(
            profiles=tuple(glued), geometry=self.geometry, n_frames=self.frame_index
        )

    def close(self) -> None:
        if self._executor is not None:
            self._executor.shutdown(wait=True)
        self._closed = True
