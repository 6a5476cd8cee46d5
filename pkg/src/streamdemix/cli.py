"""Command-line entry point: stream a video through the engine, persist results.

Events are emitted as line-delimited JSON while the stream runs; footprints,
traces, the resolved configuration, and an optional ground-truth score report
are written when the stream ends. A generator mode produces seeded synthetic
videos with their truth manifests for benchmarking.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .config import EngineConfig
from .engine import Engine
from .evaluate import match_cells
from .io import (
    ingest,
    read_truth_manifest,
    write_footprints,
    write_ground_truth,
    write_traces,
)
from .model import FrameGeometry
from .synth import CellTruth, GeneratorConfig, generate

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FORMAT = 2
EXIT_RUNTIME = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # usage failures exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclass(frozen=True)
class _TruthView:
    """Manifest-backed stand-in for a GroundTruth during scoring."""

    config: GeneratorConfig
    cells: List[CellTruth]


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="streamdemix",
        description="Stream a fluorescence video through the demixing engine.",
    )
    parser.add_argument("--input", type=Path, help="video file to process")
    parser.add_argument(
        "--format", choices=("raw_f32", "tiff_gray"), default="raw_f32",
        help="input container format",
    )
    parser.add_argument("--config", type=Path, help="JSON engine configuration file")
    parser.add_argument("--output-dir", type=Path, help="directory for result files")
    parser.add_argument("--patch-size", type=int, help="override patch edge length")
    parser.add_argument("--threads", type=int, help="override worker thread count")
    parser.add_argument("--lambda", dest="lam", type=float, help="override sparsity weight")
    parser.add_argument("--gamma", type=float, help="override plain-branch margin scale")
    parser.add_argument(
        "--report", action="store_true",
        help="score the run against a ground-truth manifest (requires --truth)",
    )
    parser.add_argument("--truth", type=Path, help="truth manifest for --report")
    parser.add_argument(
        "--generate", action="store_true",
        help="write a synthetic video and truth manifest instead of processing",
    )
    parser.add_argument("--seed", type=int, default=0, help="generator seed")
    parser.add_argument("--frames", type=int, help="generator frame count")
    parser.add_argument("--cells", type=int, help="generator cell count")
    return parser


def _resolve_config(args: argparse.Namespace) -> EngineConfig:
    config = EngineConfig.load(args.config) if args.config else EngineConfig()
    overrides = {}
    if args.patch_size is not None:
        overrides["patch_size"] = args.patch_size
    if args.threads is not None:
        overrides["threads"] = args.threads
    if args.lam is not None:
        overrides["lam"] = args.lam
    if args.gamma is not None:
        overrides["gamma_scale"] = args.gamma
    return dataclasses.replace(config, **overrides) if overrides else config


def _generate(args: argparse.Namespace) -> int:
    kwargs = {"seed": args.seed}
    if args.frames is not None:
        kwargs["frames"] = args.frames
    if args.cells is not None:
        kwargs["n_cells"] = args.cells
    truth = generate(GeneratorConfig(**kwargs))
    video_path, manifest_path = write_ground_truth(args.output_dir, truth)
    print(video_path)
    print(manifest_path)
    return EXIT_OK


def _event_line(event) -> str:
    return json.dumps(
        {
            "frame_index": int(event.frame_index),
            "profile_id": int(event.profile_id),
            "activation": float(event.activation),
            "kind": str(event.kind),
        }
    )


def _run(args: argparse.Namespace, config: EngineConfig) -> int:
    out_dir: Optional[Path] = args.output_dir
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    sink = open(out_dir / "events.jsonl", "w") if out_dir is not None else sys.stdout

    engine: Optional[Engine] = None
    n_frames = 0
    try:
        for frame in ingest(args.input, args.format):
            if engine is None:
                height, width = frame.shape
                engine = Engine(config, FrameGeometry(width=width, height=height))
            for event in engine.push_frame(frame):
                sink.write(_event_line(event) + "\n")
            n_frames += 1
        sink.flush()

        if engine is not None:
            snapshot = engine.snapshot()
            profiles: Sequence = snapshot.profiles
            traces = snapshot.traces
            width = engine.geometry.width
        else:
            profiles, traces, width = (), np.zeros((0, 0)), 0
        logger.info("processed %d frames, %d stable profiles", n_frames, len(profiles))

        if out_dir is not None:
            write_footprints(out_dir / "footprints.csv", profiles, width=max(width, 1))
            write_traces(out_dir / "traces.csv", traces)
            config.save(out_dir / "config.json")

        if args.report:
            gen_config, cells = read_truth_manifest(args.truth)
            report = match_cells(profiles, _TruthView(config=gen_config, cells=cells))
            payload = dict(report.to_dict(), n_frames=n_frames, n_profiles=len(profiles))
            text = json.dumps(payload, indent=2)
            if out_dir is not None:
                (out_dir / "report.json").write_text(text)
            else:
                print(text)
    finally:
        if engine is not None:
            engine.close()
        if out_dir is not None:
            sink.close()
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.generate:
        if args.output_dir is None:
            parser.error("--generate requires --output-dir")
        return _generate(args)
    if args.input is None:
        parser.error("--input is required unless --generate is given")
    if not args.input.exists():
        parser.error(f"input file not found: {args.input}")
    if args.report and args.truth is None:
        parser.error("--report requires --truth")

    try:
        config = _resolve_config(args)
    except (ValueError, OSError) as exc:
        parser.error(f"bad configuration: {exc}")

    try:
        return _run(args, config)
    except ValueError as exc:
        logger.error("input rejected: %s", exc)
        return EXIT_FORMAT
    except RuntimeError as exc:
        logger.error("stream aborted: %s", exc)
        return EXIT_RUNTIME
    except OSError as exc:
        logger.error("i/o failure: %s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
