"""Tests for frame tiling, border matching, and profile gluing."""

import numpy as np
import pytest

from streamdemix.model import FrameGeometry
from streamdemix.patches import (
    BorderMatch,
    MatchTier,
    PatchResult,
    collect_matches,
    glue,
    match_across_patches,
    partition,
    trace_correlation,
    translate_pixels,
)
from streamdemix.profiles import Profile, ProfileState


def make_profile(pixels, weights) -> Profile:
    idx = np.asarray(pixels, dtype=np.int64)
    order = np.argsort(idx)
    return Profile(
        pixels=idx[order],
        weights=np.asarray(weights, dtype=np.float64)[order],
        state=ProfileState.STABLE,
        last_active_frame=0,
        activity_count=5,
    )


def gaussian_profile(rect, center_row, center_col, sigma=2.0, radius=4):
    """Profile in patch-local coordinates from a frame-coordinate Gaussian."""
    pixels, weights = [], []
    for r in range(rect.row0, rect.row0 + rect.height):
        for c in range(rect.col0, rect.col0 + rect.width):
            d2 = (r - center_row) ** 2 + (c - center_col) ** 2
            if d2 <= radius**2:
                local = (r - rect.row0) * rect.width + (c - rect.col0)
                pixels.append(local)
                weights.append(np.exp(-d2 / (2.0 * sigma**2)))
    if not pixels:
        return None
    return make_profile(pixels, weights)


def spike_trace(n_frames, onsets, amplitude=1.0, width=6):
    trace = np.zeros(n_frames)
    for onset in onsets:
        for k in range(width):
            if onset + k < n_frames:
                trace[onset + k] += amplitude * np.exp(-k / 2.0)
    return trace


class TestPartition:
    def test_even_tiling(self):
        """A 160x160 frame with patch 80 splits into a 2x2 grid."""
        layout = partition(FrameGeometry(width=160, height=160), patch_size=80)
        assert (layout.rows, layout.cols) == (2, 2)
        assert all(p.height == 80 and p.width == 80 for p in layout.patches)

    def test_ragged_tiling(self):
        """500 = 6 * 80 + 20, so the last row and column of tiles are 20 wide."""
        layout = partition(FrameGeometry(width=500, height=500), patch_size=80)
        assert (layout.rows, layout.cols) == (7, 7)
        assert layout.rect(0, 6).width == 20
        assert layout.rect(6, 0).height == 20
        assert layout.rect(6, 6).height == 20 and layout.rect(6, 6).width == 20
        assert layout.rect(0, 0).height == 80 and layout.rect(0, 0).width == 80

    def test_exact_cover(self):
        """Every pixel belongs to exactly one tile."""
        geometry = FrameGeometry(width=130, height=70)
        layout = partition(geometry, patch_size=32)
        counts = np.zeros((70, 130), dtype=int)
        for p in layout.patches:
            counts[p.row0 : p.row0 + p.height, p.col0 : p.col0 + p.width] += 1
        assert np.all(counts == 1)

    def test_patch_equals_frame(self):
        """Patch size equal to the frame gives a single tile."""
        layout = partition(FrameGeometry(width=90, height=90), patch_size=90)
        assert layout.n_patches == 1
        assert layout.patches[0].height == 90 and layout.patches[0].width == 90

    def test_patch_larger_than_frame(self):
        """Patch size beyond the frame still yields one full-frame tile."""
        layout = partition(FrameGeometry(width=90, height=60), patch_size=200)
        assert layout.n_patches == 1
        assert layout.patches[0].height == 60 and layout.patches[0].width == 90

    def test_patch_too_small(self):
        """Patch sizes under 16 pixels are rejected."""
        with pytest.raises(ValueError, match="at least 16"):
            partition(FrameGeometry(width=90, height=90), patch_size=15)

    def test_margin_expands_and_clamps(self):
        """A margin widens interior tiles on every side but stops at the frame."""
        layout = partition(FrameGeometry(width=160, height=160), patch_size=80, margin=4)
        corner = layout.rect(0, 0)
        assert (corner.row0, corner.col0) == (0, 0)
        assert corner.height == 84 and corner.width == 84
        last = layout.rect(1, 1)
        assert (last.row0, last.col0) == (76, 76)
        assert last.height == 84 and last.width == 84

    def test_adjacent_pairs(self):
        """A 2x3 grid has 2*2 horizontal plus 1*3 vertical neighbour pairs."""
        layout = partition(FrameGeometry(width=96, height=64), patch_size=32)
        assert (layout.rows, layout.cols) == (2, 3)
        pairs = layout.adjacent_pairs()
        assert len(pairs) == 7
        assert all(a.index != b.index for a, b in pairs)

    def test_subframe_view(self):
        """Tile subframes are views with the tile's shape."""
        layout = partition(FrameGeometry(width=40, height=20), patch_size=20)
        frame = np.arange(800, dtype=np.float64).reshape(20, 40)
        sub = layout.rect(0, 1).subframe(frame)
        assert sub.shape == (20, 20)
        assert sub[0, 0] == frame[0, 20]


class TestTraceCorrelation:
    def test_shared_transients_high_correlation(self):
        base = spike_trace(60, [10, 30])
        corr = trace_correlation(base, 0.5 * base + 0.01)
        assert corr == pytest.approx(1.0, abs=1e-9)

    def test_too_few_active_frames_undefined(self):
        quiet = np.zeros(60)
        quiet[10] = 1.0
        assert trace_correlation(quiet, quiet.copy()) is None

    def test_restrict_mask_limits_window(self):
        """Restricting to late frames drops early shared transients."""
        a = spike_trace(80, [10, 50])
        b = np.concatenate([a[:40], np.zeros(40)])
        late = np.arange(80) >= 40
        full = trace_correlation(a, b)
        restricted = trace_correlation(a, b, restrict=late)
        assert full is not None and full > 0.5
        assert restricted is None or restricted < 0.0

    def test_length_mismatch_raises(self):
        with pytest.raises(ValueError, match="equal length"):
            trace_correlation(np.zeros(10), np.zeros(11))


class TestMatchAcrossPatches:
    def seam_layout(self):
        return partition(FrameGeometry(width=40, height=20), patch_size=20)

    def test_split_cell_bidirectional(self):
        """A cell straddling the seam matches at the top tier with high correlation."""
        layout = self.seam_layout()
        left, right = layout.rect(0, 0), layout.rect(0, 1)
        prof_l = gaussian_profile(left, 10, 20)
        prof_r = gaussian_profile(right, 10, 20)
        base = spike_trace(60, [10, 30])
        m = match_across_patches(prof_l, base, left, prof_r, 0.8 * base, right)
        assert m is not None
        assert m.tier is MatchTier.BIDIRECTIONAL
        assert m.spatial_score >= 0.9
        assert m.temporal_score >= 0.95

    def test_independent_neighbours_rejected(self):
        """Cells with matching strips but disjoint activity do not glue."""
        layout = self.seam_layout()
        left, right = layout.rect(0, 0), layout.rect(0, 1)
        # mirrored cells whose tails produce near-identical strip patterns
        prof_l = gaussian_profile(left, 10, 17)
        prof_r = gaussian_profile(right, 10, 22)
        trace_l = spike_trace(60, [5])
        trace_r = spike_trace(60, [35])
        m = match_across_patches(prof_l, trace_l, left, prof_r, trace_r, right)
        assert m is None

    def test_dimmer_partial_view_asymmetric(self):
        """A truncated half-view of the strip lands in the asymmetric tier."""
        layout = self.seam_layout()
        left, right = layout.rect(0, 0), layout.rect(0, 1)
        full = gaussian_profile(left, 10, 20)
        # right-patch profile covering only the upper half of the cross-section
        rows = np.arange(6, 11)
        partial = make_profile(rows * right.width, np.exp(-((rows - 10.0) ** 2) / 8.0))
        base = spike_trace(60, [10, 30])
        m = match_across_patches(full, base, left, partial, base, right)
        assert m is not None
        assert m.tier is MatchTier.ASYMMETRIC
        assert 0.6 <= m.spatial_score < 0.9

    def test_quiet_traces_cap_tier(self):
        """Too few jointly active frames leaves the temporal score undefined."""
        layout = self.seam_layout()
        left, right = layout.rect(0, 0), layout.rect(0, 1)
        prof_l = gaussian_profile(left, 10, 20)
        prof_r = gaussian_profile(right, 10, 20)
        quiet = np.zeros(60)
        m = match_across_patches(prof_l, quiet, left, prof_r, quiet, right)
        assert m is not None
        assert m.tier is MatchTier.SPATIAL_SYM_TEMPORAL_ASYM
        assert np.isnan(m.temporal_score)

    def test_uncorrelated_traces_rejected(self):
        """A defined correlation below the floor rejects the match outright."""
        layout = self.seam_layout()
        left, right = layout.rect(0, 0), layout.rect(0, 1)
        prof_l = gaussian_profile(left, 10, 20)
        prof_r = gaussian_profile(right, 10, 20)
        rng = np.random.default_rng(7)
        trace_l = rng.uniform(0.5, 1.0, size=200)
        trace_r = rng.uniform(0.5, 1.0, size=200)
        m = match_across_patches(prof_l, trace_l, left, prof_r, trace_r, right)
        assert m is None

    def test_interior_profile_no_match(self):
        """A profile that never reaches the border strip cannot match."""
        layout = self.seam_layout()
        left, right = layout.rect(0, 0), layout.rect(0, 1)
        interior = gaussian_profile(left, 10, 5, radius=3)
        prof_r = gaussian_profile(right, 10, 20)
        base = spike_trace(60, [10])
        assert match_across_patches(interior, base, left, prof_r, base, right) is None

    def test_offset_strips_no_overlap(self):
        """Strip patterns at different border positions share no coordinate."""
        layout = self.seam_layout()
        left, right = layout.rect(0, 0), layout.rect(0, 1)
        prof_l = gaussian_profile(left, 4, 20, radius=3)
        prof_r = gaussian_profile(right, 15, 20, radius=3)
        base = spike_trace(60, [10])
        assert match_across_patches(prof_l, base, left, prof_r, base, right) is None

    def test_non_adjacent_patches(self):
        """Diagonal tiles are not adjacent."""
        layout = partition(FrameGeometry(width=40, height=40), patch_size=20)
        a, b = layout.rect(0, 0), layout.rect(1, 1)
        prof = gaussian_profile(a, 10, 10)
        with pytest.raises(ValueError, match="not adjacent"):
            match_across_patches(prof, np.zeros(5), a, prof, np.zeros(5), b)

    def test_trace_length_mismatch(self):
        """Traces of different lengths are a caller error."""
        layout = self.seam_layout()
        left, right = layout.rect(0, 0), layout.rect(0, 1)
        prof_l = gaussian_profile(left, 10, 20)
        prof_r = gaussian_profile(right, 10, 20)
        with pytest.raises(ValueError, match="equal length"):
            match_across_patches(prof_l, np.zeros(10), left, prof_r, np.zeros(9), right)

    def test_vertical_seam(self):
        """Matching works across a horizontal border (top/bottom strips)."""
        layout = partition(FrameGeometry(width=20, height=40), patch_size=20)
        top, bottom = layout.rect(0, 0), layout.rect(1, 0)
        prof_t = gaussian_profile(top, 20, 10)
        prof_b = gaussian_profile(bottom, 20, 10)
        base = spike_trace(60, [10, 30])
        m = match_across_patches(prof_t, base, top, prof_b, base, bottom)
        assert m is not None
        assert m.tier is MatchTier.BIDIRECTIONAL


class TestGlue:
    def layout_2x2(self):
        return partition(FrameGeometry(width=40, height=40), patch_size=20)

    def empty_results(self, layout, n_frames=10):
        return {
            p.index: PatchResult(rect=p, profiles=(), traces=np.zeros((0, n_frames)))
            for p in layout.patches
        }

    def test_translate_pixels(self):
        """Local indices map to frame indices through the tile offset."""
        layout = self.layout_2x2()
        rect = layout.rect(1, 1)
        local = np.array([0, 1, 20], dtype=np.int64)  # (0,0), (0,1), (1,0) locally
        frame_idx = translate_pixels(local, rect, layout.geometry)
        assert frame_idx.tolist() == [20 * 40 + 20, 20 * 40 + 21, 21 * 40 + 20]

    def test_no_matches_disjoint_union(self):
        """Without matches the global set is the union of the patch sets."""
        layout = self.layout_2x2()
        results = self.empty_results(layout)
        p0 = make_profile([0, 1], [1.0, 2.0])
        p3 = make_profile([0], [3.0])
        results[0] = PatchResult(layout.patches[0], (p0,), np.ones((1, 10)))
        results[3] = PatchResult(layout.patches[3], (p3,), 2 * np.ones((1, 10)))
        out = glue([], results, layout)
        assert len(out) == 2
        assert out[0].members == ((0, 0),)
        assert out[1].members == ((3, 0),)
        assert out[0].pixels.tolist() == [0, 1]
        assert out[1].pixels.tolist() == [20 * 40 + 20]

    def test_chain_across_three_patches(self):
        """Transitive matches collapse a three-patch chain into one profile."""
        layout = partition(FrameGeometry(width=60, height=20), patch_size=20)
        results = self.empty_results(layout, n_frames=4)
        traces = [
            np.array([1.0, 0.0, 3.0, 0.0]),
            np.array([0.0, 2.0, 1.0, 0.0]),
            np.array([0.5, 0.5, 0.5, 4.0]),
        ]
        for idx in range(3):
            prof = make_profile([5 * 20 + 10], [1.0 + idx])
            results[idx] = PatchResult(layout.patches[idx], (prof,), traces[idx][None, :])
        matches = [
            BorderMatch(0, 1, 0, 0, MatchTier.BIDIRECTIONAL, 1.0, 1.0),
            BorderMatch(1, 2, 0, 0, MatchTier.ASYMMETRIC, 0.7, 1.0),
        ]
        out = glue(matches, results, layout)
        assert len(out) == 1
        assert out[0].members == ((0, 0), (1, 0), (2, 0))
        assert out[0].trace.tolist() == [1.0, 2.0, 3.0, 4.0]
        assert out[0].pixels.tolist() == [5 * 60 + 10, 5 * 60 + 30, 5 * 60 + 50]

    def test_overlapping_pixels_take_max_weight(self):
        """Glued footprints keep the per-pixel max where members overlap."""
        layout = self.layout_2x2()
        results = self.empty_results(layout, n_frames=2)
        # hand-built rects that map both local footprints onto frame pixel 25
        a = make_profile([25], [2.0])
        b = make_profile([25], [5.0])
        results[0] = PatchResult(layout.patches[0], (a,), np.ones((1, 2)))
        # patch 0 again as a stand-in for an overlapping margin region
        results[1] = PatchResult(layout.patches[0], (b,), np.ones((1, 2)))
        out = glue([BorderMatch(0, 1, 0, 0, MatchTier.BIDIRECTIONAL, 1.0, 1.0)], results, layout)
        assert len(out) == 1
        # local (1, 5) in the corner tile is frame pixel 1 * 40 + 5
        assert out[0].pixels.tolist() == [45]
        assert out[0].weights.tolist() == [5.0]

    def test_deterministic_under_match_order(self):
        """Shuffled match order produces identical glued output."""
        layout = partition(FrameGeometry(width=60, height=20), patch_size=20)
        results = self.empty_results(layout, n_frames=3)
        for idx in range(3):
            prof = make_profile([idx + 1, 50 + idx], [1.0, 2.0])
            results[idx] = PatchResult(
                layout.patches[idx], (prof,), np.full((1, 3), float(idx))
            )
        matches = [
            BorderMatch(0, 1, 0, 0, MatchTier.BIDIRECTIONAL, 1.0, 1.0),
            BorderMatch(1, 2, 0, 0, MatchTier.BIDIRECTIONAL, 1.0, 1.0),
        ]
        out_fwd = glue(matches, results, layout)
        out_rev = glue(matches[::-1], dict(reversed(results.items())), layout)
        assert len(out_fwd) == len(out_rev) == 1
        assert out_fwd[0].pixels.tolist() == out_rev[0].pixels.tolist()
        assert out_fwd[0].trace.tolist() == out_rev[0].trace.tolist()
        assert out_fwd[0].members == out_rev[0].members

    def test_collect_matches_and_glue_seam_cell(self):
        """End to end: a seam cell glues to one profile, an interior cell stays alone."""
        layout = self.layout_2x2()
        left, right = layout.rect(0, 0), layout.rect(0, 1)
        interior_rect = layout.rect(1, 1)
        prof_l = gaussian_profile(left, 10, 20)
        prof_r = gaussian_profile(right, 10, 20)
        prof_i = gaussian_profile(interior_rect, 30, 30, radius=3)
        base = spike_trace(80, [10, 40, 60])
        results = self.empty_results(layout, n_frames=80)
        results[left.index] = PatchResult(left, (prof_l,), base[None, :])
        results[right.index] = PatchResult(right, (prof_r,), (0.7 * base)[None, :])
        results[interior_rect.index] = PatchResult(
            interior_rect, (prof_i,), spike_trace(80, [25])[None, :]
        )
        matches = collect_matches(layout, results)
        assert len(matches) == 1
        assert matches[0].tier is MatchTier.BIDIRECTIONAL
        out = glue(matches, results, layout)
        assert len(out) == 2
        seam = next(g for g in out if len(g.members) == 2)
        lone = next(g for g in out if len(g.members) == 1)
        assert seam.area == prof_l.area + prof_r.area
        assert lone.members == ((interior_rect.index, 0),)
