"""Tests for the engine configuration schema."""

import pytest

from streamdemix.config import EngineConfig


class TestEngineConfig:
    def test_defaults_construct(self):
        """The default config is internally valid."""
        cfg = EngineConfig()
        assert cfg.lam > 0
        assert cfg.patch_size >= 16

    def test_json_round_trip(self):
        """Serialization round-trips every field, including tuples."""
        cfg = EngineConfig(lam=0.3, patch_size=40, noise_sections=(2, 4), threads=2)
        restored = EngineConfig.from_json(cfg.to_json())
        assert restored == cfg
        assert isinstance(restored.noise_sections, tuple)

    def test_file_round_trip(self, tmp_path):
        """Saving to a file and loading it back reproduces the config."""
        cfg = EngineConfig(k_sigma=2.5, quiet_frames=7)
        path = tmp_path / "engine.json"
        cfg.save(path)
        assert EngineConfig.load(path) == cfg

    def test_unknown_key_rejected(self):
        """Unknown keys are rejected by name."""
        with pytest.raises(ValueError, match="sparsity"):
            EngineConfig.from_dict({"sparsity": 0.4})

    def test_value_validation(self):
        """Out-of-range values fail fast."""
        with pytest.raises(ValueError, match="threads"):
            EngineConfig(threads=0)
        with pytest.raises(ValueError, match="patch_size"):
            EngineConfig(patch_size=8)
        with pytest.raises(ValueError, match="denoise_window"):
            EngineConfig(denoise_window=0)
