"""Engine configuration: every tunable in one serializable dataclass.

Thresholds that depend on brightness are stored as noise-relative scales and
multiplied by the per-frame noise estimate at run time, which keeps decisions
invariant under rescaling of the input video.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

from .model import DEFAULT_LAMBDA
from .patches import DEFAULT_PATCH_SIZE, MIN_COMMON_ACTIVE, MIN_PATCH_SIZE, TAU_CORR, TAU_GLUE
from .pipeline import DEFAULT_K_SIGMA, DEFAULT_MIN_AREA, DEFAULT_SECTIONS
from .profiles import (
    DEFAULT_MIN_ACTIVE,
    DEFAULT_QUIET_FRAMES,
    TAU_BRIGHT,
    TAU_INSIDE,
    TAU_SAME,
)


@dataclass(frozen=True)
class EngineConfig:
    # robust estimation
    lam: float = DEFAULT_LAMBDA  # l1 weight per unit of noise scale
    gamma_scale: float = 0.05  # plain-branch margin per pixel noise variance
    kernel_radius: int = 2
    kernel_stride: Optional[int] = None  # None: same as the radius
    kernel_sigma: Optional[float] = None  # None: half the radius
    # denoising and detection
    denoise_window: int = 1
    denoise_sigma: float = 1.0
    k_sigma: float = DEFAULT_K_SIGMA
    min_area: int = DEFAULT_MIN_AREA
    noise_sections: Tuple[int, int] = DEFAULT_SECTIONS
    gamma_detect_scale: float = 2.0  # early-detection threshold in noise units
    # profile lifecycle
    quiet_frames: int = DEFAULT_QUIET_FRAMES
    min_active: int = DEFAULT_MIN_ACTIVE
    tau_same: float = TAU_SAME
    tau_inside: float = TAU_INSIDE
    tau_bright: float = TAU_BRIGHT
    # patching
    patch_size: int = DEFAULT_PATCH_SIZE
    margin: int = 0
    tau_glue: float = TAU_GLUE
    tau_corr: float = TAU_CORR
    min_common_active: int = MIN_COMMON_ACTIVE
    # solver and execution
    solver_tol: float = 1e-6
    solver_max_iter: int = 2000
    threads: int = 1
    max_consecutive_failures: int = 5

    def __post_init__(self) -> None:
        if self.lam < 0 or self.gamma_scale < 0:
            raise ValueError("lam and gamma_scale must be non-negative")
        if self.kernel_radius < 1:
            raise ValueError("kernel_radius must be at least 1")
        if self.denoise_window < 1:
            raise ValueError("denoise_window must be at least 1")
        if self.patch_size < MIN_PATCH_SIZE:
            raise ValueError(f"patch_size must be at least {MIN_PATCH_SIZE}")
        if self.threads < 1:
            raise ValueError("threads must be at least 1")
        if self.solver_max_iter < 1 or self.solver_tol <= 0:
            raise ValueError("solver settings must be positive")
        if self.max_consecutive_failures < 1:
            raise ValueError("max_consecutive_failures must be at least 1")

    def to_dict(self) -> Dict[str, Any]:
        out = dataclasses.asdict(self)
        out["noise_sections"] = list(self.noise_sections)
        return out

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "EngineConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown config key: {', '.join(unknown)}")
        fixed = dict(data)
        if "noise_sections" in fixed:
            fixed["noise_sections"] = tuple(fixed["noise_sections"])
        return cls(**fixed)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EngineConfig":
        return cls.from_dict(json.loads(text))

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "EngineConfig":
        return cls.from_json(Path(path).read_text())
