"""Streaming demixing of calcium-imaging movies.

Frame-by-frame robust trace estimation for known cells plus on-line
discovery of cells that were not in the initial profile set.
"""

__version__ = "0.1.0"

from .config import EngineConfig
from .engine import DetectionEvent, Engine, EngineSnapshot, FrameFailure
from .evaluate import (
    MatchPair,
    MatchReport,
    ThroughputReport,
    TransientReport,
    match_cells,
    measure_throughput,
    transient_metrics,
)
from .io import ingest, read_truth_manifest, write_ground_truth
from .model import FrameGeometry, SeudoProblem, SeudoSolution, seudo_solve
from .optimizer import (
    DenseColumns,
    Objective,
    OptimizerState,
    SolveReport,
    StopReason,
    estimate_lipschitz,
    lipschitz_bounds,
    solve,
    step,
)
from .synth import CellTruth, GeneratorConfig, GroundTruth, generate

__all__ = [
    "CellTruth",
    "DenseColumns",
    "DetectionEvent",
    "Engine",
    "EngineConfig",
    "EngineSnapshot",
    "FrameFailure",
    "FrameGeometry",
    "GeneratorConfig",
    "GroundTruth",
    "MatchPair",
    "MatchReport",
    "Objective",
    "OptimizerState",
    "SeudoProblem",
    "SeudoSolution",
    "SolveReport",
    "StopReason",
    "ThroughputReport",
    "TransientReport",
    "estimate_lipschitz",
    "generate",
    "ingest",
    "lipschitz_bounds",
    "match_cells",
    "measure_throughput",
    "read_truth_manifest",
    "solve",
    "step",
    "transient_metrics",
    "write_ground_truth",
    "__version__",
]
