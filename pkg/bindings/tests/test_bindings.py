"""Tests for the handle API: lifecycle, config schema, events, snapshots."""

import numpy as np
import pytest

from streamdemix import EngineConfig
from streamdemix_bindings import (
    ClosedHandleError,
    EngineHandle,
    close,
    create_engine,
    export_config,
    push_frame,
    snapshot,
)


def gaussian_cell(height, width, center_row, center_col, sigma=2.5):
    rr, cc = np.mgrid[0:height, 0:width]
    cell = np.exp(-(((rr - center_row) ** 2 + (cc - center_col) ** 2) / (2 * sigma**2)))
    cell[cell < 0.05] = 0.0
    return cell


def calcium_trace(n_frames, onsets, amplitude=3.0, decay=4.0, rise=1.5):
    trace = np.zeros(n_frames)
    t = np.arange(n_frames, dtype=np.float64)
    for onset in onsets:
        dt = t - onset
        pulse = np.where(dt >= 0, np.exp(-dt / decay) * (1 - np.exp(-np.maximum(dt, 0) / rise)), 0.0)
        trace = np.maximum(trace, pulse)
    return amplitude * trace


def single_cell_video(rng, height=48, width=48, n_frames=60, onsets=(5, 25, 45), noise=0.1):
    cell = gaussian_cell(height, width, height // 2, width // 2)
    trace = calcium_trace(n_frames, onsets)
    video = 1.0 + trace[:, None, None] * cell[None] + rng.normal(0, noise, (n_frames, height, width))
    return video


class TestCreateEngine:
    def test_default_config_gives_empty_handle(self):
        """A fresh handle has no profiles and no trace history."""
        handle = create_engine()
        profiles, traces = snapshot(handle)
        assert profiles.size == 0
        assert traces.size == 0

    def test_bad_key_error_names_the_key(self):
        """Unknown config keys are rejected with the key in the message."""
        with pytest.raises(ValueError, match="sigma_half"):
            create_engine({"sigma_half": 0.5})

    def test_bad_value_is_rejected(self):
        """Schema violations on values surface the config error."""
        with pytest.raises(ValueError):
            create_engine({"threads": 0})

    def test_config_round_trip(self):
        """A full config mapping comes back unchanged from export_config."""
        mapping = EngineConfig(lam=0.3, quiet_frames=7).to_dict()
        handle = create_engine(mapping)
        assert export_config(handle) == mapping

    def test_partial_config_overrides_defaults(self):
        """Missing keys take defaults, given keys take the given values."""
        exported = export_config(create_engine({"min_area": 9}))
        assert exported["min_area"] == 9
        assert exported["lam"] == EngineConfig().lam

    def test_returns_handle_type(self):
        """create_engine hands back the opaque handle type."""
        assert isinstance(create_engine(), EngineHandle)


class TestPushFrame:
    def test_zero_frame_gives_no_events(self):
        """An all-zero frame produces an empty event list."""
        handle = create_engine()
        assert push_frame(handle, np.zeros((24, 24))) == []

    def test_events_reference_current_frame(self):
        """Events from push_frame carry the index of the pushed frame."""
        rng = np.random.default_rng(3)
        video = single_cell_video(rng)
        handle = create_engine()
        for i, frame in enumerate(video):
            for event in push_frame(handle, frame):
                assert event.frame_index == i
        close(handle)

    def test_wrong_shape_is_an_error(self):
        """A frame that disagrees with the configured geometry is rejected."""
        handle = create_engine()
        push_frame(handle, np.zeros((24, 24)))
        with pytest.raises(ValueError, match="shape"):
            push_frame(handle, np.zeros((24, 25)))

    def test_non_2d_frame_is_an_error(self):
        """Only 2-D pixel arrays are accepted."""
        handle = create_engine()
        with pytest.raises(ValueError, match="2-D"):
            push_frame(handle, np.zeros(24))

    def test_discovers_planted_cell(self):
        """Streaming a one-cell video through the handle yields one profile."""
        rng = np.random.default_rng(4)
        handle = create_engine()
        for frame in single_cell_video(rng):
            push_frame(handle, frame)
        profiles, traces = snapshot(handle)
        assert profiles.shape == (1, 48, 48)
        assert traces.shape == (1, 60)
        close(handle)

    def test_concurrent_push_is_an_error(self):
        """Two overlapping push_frame calls on one handle fail cleanly."""
        handle = create_engine()
        handle._gate.acquire()  # simulate a push still in flight
        with pytest.raises(RuntimeError, match="concurrent"):
            push_frame(handle, np.zeros((16, 16)))
        handle._gate.release()

    def test_independent_handles_do_not_interact(self):
        """Frames pushed to one handle leave another handle untouched."""
        rng = np.random.default_rng(5)
        busy, idle = create_engine(), create_engine()
        for frame in single_cell_video(rng):
            push_frame(busy, frame)
        profiles, _ = snapshot(idle)
        assert profiles.size == 0


class TestSnapshot:
    def test_snapshot_twice_identical(self):
        """Two snapshots with no frames between are equal."""
        rng = np.random.default_rng(6)
        handle = create_engine()
        for frame in single_cell_video(rng):
            push_frame(handle, frame)
        p1, t1 = snapshot(handle)
        p2, t2 = snapshot(handle)
        np.testing.assert_array_equal(p1, p2)
        np.testing.assert_array_equal(t1, t2)

    def test_snapshot_is_immutable(self):
        """Returned arrays are read-only copies."""
        handle = create_engine()
        push_frame(handle, np.zeros((16, 16)))
        profiles, traces = snapshot(handle)
        with pytest.raises(ValueError):
            traces[...] = 1.0
        with pytest.raises(ValueError):
            profiles[...] = 1.0

    def test_snapshot_detached_from_engine(self):
        """Frames pushed after a snapshot do not grow its trace axis."""
        rng = np.random.default_rng(7)
        video = single_cell_video(rng)
        handle = create_engine()
        for frame in video[:30]:
            push_frame(handle, frame)
        _, traces = snapshot(handle)
        for frame in video[30:]:
            push_frame(handle, frame)
        assert traces.shape[1] == 30


class TestClose:
    def test_operations_on_closed_handle_fail(self):
        """push_frame, snapshot, and export_config all reject a closed handle."""
        handle = create_engine()
        push_frame(handle, np.zeros((16, 16)))
        close(handle)
        with pytest.raises(ClosedHandleError):
            push_frame(handle, np.zeros((16, 16)))
        with pytest.raises(ClosedHandleError):
            snapshot(handle)
        with pytest.raises(ClosedHandleError):
            export_config(handle)

    def test_close_is_idempotent(self):
        """Closing twice is a no-op, like file handles."""
        handle = create_engine()
        close(handle)
        close(handle)

    def test_close_before_any_frame(self):
        """A handle that never saw a frame closes cleanly."""
        close(create_engine())
