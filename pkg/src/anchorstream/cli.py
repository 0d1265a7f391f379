"""Command-line front end: encode, decode, bench, synth, inspect."""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Optional

import numpy as np

from . import codec
from .errors import BudgetError, ConfigError, NumericalError, PlyParseError, StreamFormatError
from .fitting import FitConfig
from .ply_io import read_gaussian_ply, write_gaussian_ply
from .session import (
    FrameMetrics,
    StaticSource,
    SyntheticSource,
    decode_session,
    encode_session,
)
from .synth import generate_scene, load_scene_spec
from .types import CompositionMode, GaussianSet, Quantization, StreamConfig

EXIT_OK = 0
EXIT_IO = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


@dataclass
class SessionManifest:
    """Everything one reproducible session needs; built from CLI flags."""

    input_path: Path
    output_path: Optional[Path]
    metrics_path: Optional[Path]
    config: StreamConfig
    fit: FitConfig
    budget: Optional[int]
    seed: Optional[int]
    frames: int


def _parse_fraction(text: str) -> Fraction:
    try:
        return Fraction(text)
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"bad fraction {text!r}: {exc}") from exc


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--levels", type=int, default=3, help="hierarchy depth L (1..4)")
    p.add_argument("--finest-fraction", default="1/24",
                   help="finest-level anchor fraction, e.g. 1/24")
    p.add_argument("--level-ratio", type=int, default=3,
                   help="anchor count ratio between adjacent levels")
    p.add_argument("--reconfig-period", type=int, default=10,
                   help="rebuild the hierarchy every T frames")
    p.add_argument("--quantization", choices=[q.name for q in Quantization],
                   default="half16")
    p.add_argument("--mode", choices=[m.name for m in CompositionMode], default="additive",
                   help="deformation composition mode")
    p.add_argument("--phase1-steps", type=int, default=100)
    p.add_argument("--phase2-steps", type=int, default=100)
    p.add_argument("--densify-threshold", type=float, default=0.05)


def _config_from_args(args) -> StreamConfig:
    return StreamConfig(
        levels=args.levels,
        finest_fraction=_parse_fraction(args.finest_fraction),
        level_ratio=args.level_ratio,
        reconfig_period=args.reconfig_period,
        quantization=Quantization[args.quantization],
        phase1_steps=args.phase1_steps,
        phase2_steps=args.phase2_steps,
        densify_threshold=args.densify_threshold,
        composition_mode=CompositionMode[args.mode],
    )


def _load_input(path: Path, frames: int, seed: Optional[int]):
    """Base gaussians + motion source from a scene spec (.json) or PLY file."""
    if path.suffix.lower() == ".json":
        spec = load_scene_spec(path)
        if seed is not None:
            spec.seed = seed
        scene = generate_scene(spec)
        source = SyntheticSource(scene)
        return source.base_gaussians(), source
    base = read_gaussian_ply(path.read_bytes())
    return base, StaticSource(base, frames)


def _write_metrics(path: Path, metrics: list[FrameMetrics], levels: int) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["frame", "loss", "mean_error", "bytes"]
        header += [f"anchors_l{i}" for i in range(1, levels + 1)]
        header += ["reconfig", "checksum"]
        writer.writerow(header)
        for m in metrics:
            row = [m.frame_index, f"{m.loss:.9e}", f"{m.mean_error:.9e}", m.payload_bytes]
            row += list(m.anchor_counts)
            row += [int(m.reconfig), m.checksum]
            writer.writerow(row)


def cmd_encode(args) -> int:
    manifest = SessionManifest(
        input_path=Path(args.input),
        output_path=Path(args.output),
        metrics_path=Path(args.metrics) if args.metrics else None,
        config=_config_from_args(args),
        fit=FitConfig(
            steps_phase1=args.phase1_steps,
            learning_rate=args.learning_rate,
            momentum=args.momentum,
            steps_phase2=args.phase2_steps,
            densify_threshold=args.densify_threshold,
            coarse_to_fine=args.coarse_to_fine,
        ),
        budget=args.budget,
        seed=args.seed,
        frames=args.frames,
    )
    base, source = _load_input(manifest.input_path, manifest.frames, manifest.seed)
    result = encode_session(base, source, manifest.config, manifest.fit, manifest.budget)
    manifest.output_path.write_bytes(result.stream)
    if manifest.metrics_path is not None:
        _write_metrics(manifest.metrics_path, result.metrics, manifest.config.levels)
    if result.planned_counts is not None:
        print(f"planned anchor counts (coarse->fine): {result.planned_counts}")
    print(result.report.decomposition())
    print(f"stream: {manifest.output_path} ({len(result.stream)} bytes)")
    print(f"final checksum: {result.metrics[-1].checksum}")
    return EXIT_OK


def cmd_decode(args) -> int:
    stream = Path(args.stream).read_bytes()
    base, _ = _load_input(Path(args.frame0), frames=2, seed=None)
    result = decode_session(
        base, stream,
        level_ratio=args.level_ratio,
        composition_mode=CompositionMode[args.mode],
    )
    out_dir = Path(args.output_dir) if args.output_dir else None
    if out_dir is not None and args.export_every > 0:
        out_dir.mkdir(parents=True, exist_ok=True)
        # replay again for export snapshots only when asked; cheap at desk scale
        replay = decode_session(base, stream, level_ratio=args.level_ratio,
                                composition_mode=CompositionMode[args.mode], keep_frames=True)
        from .session import SceneState, _advance_state  # local: not public API
        from .hierarchy import build_hierarchy, rehierarchize

        config = StreamConfig(
            levels=replay.header.levels,
            finest_fraction=replay.header.finest_fraction,
            level_ratio=args.level_ratio,
            reconfig_period=replay.header.reconfig_period,
            quantization=replay.header.quantization,
            composition_mode=CompositionMode[args.mode],
        )
        state = SceneState(base.copy(), build_hierarchy(base, config), 0)
        for payload in replay.frames:
            if payload.reconfig:
                state.hierarchy, _ = rehierarchize(state, config)
            state = _advance_state(state, payload.deltas, config, payload.frame_index)
            if payload.frame_index % args.export_every == 0:
                path = out_dir / f"frame_{payload.frame_index:04d}.ply"
                path.write_bytes(write_gaussian_ply(state.gaussians))
    print(f"decoded {len(result.metrics)} frames, {len(result.state.gaussians)} gaussians")
    print(f"final checksum: {result.metrics[-1].checksum}")
    return EXIT_OK


def cmd_bench(args) -> int:
    spec = load_scene_spec(Path(args.spec))
    scene = generate_scene(spec)
    budgets = [int(b) for b in args.budgets.split(",")] if args.budgets else [None]
    level_list = [int(v) for v in args.levels_sweep.split(",")] if args.levels_sweep else [args.levels]
    rows = []
    failures = []
    for levels in level_list:
        for budget in sorted(b for b in budgets if b is not None) or [None]:
            cfg_args = argparse.Namespace(**vars(args))
            cfg_args.levels = levels
            config = _config_from_args(cfg_args)
            fit = FitConfig(
                steps_phase1=args.phase1_steps,
                learning_rate=args.learning_rate,
                momentum=args.momentum,
                steps_phase2=args.phase2_steps,
                densify_threshold=args.densify_threshold,
            )
            source = SyntheticSource(scene)
            try:
                result = encode_session(source.base_gaussians(), source, config, fit, budget)
            except (BudgetError, NumericalError) as exc:
                failures.append((levels, budget, str(exc)))
                break
            mean_bytes = result.report.mean_bytes
            mean_err = float(np.mean([m.mean_error for m in result.metrics]))
            rows.append((levels, budget if budget is not None else 0, mean_bytes, mean_err))
    print(f"{'levels':>6} {'budget':>10} {'bytes/frame':>12} {'mean_error':>12}")
    for levels, budget, mean_bytes, mean_err in rows:
        print(f"{levels:>6} {budget:>10} {mean_bytes:>12.1f} {mean_err:>12.6e}")
    if args.output:
        with open(args.output, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["levels", "budget", "bytes_per_frame", "mean_error"])
            for row in rows:
                writer.writerow([row[0], row[1], f"{row[2]:.3f}", f"{row[3]:.9e}"])
    if failures:
        for levels, budget, msg in failures:
            print(f"FAILED levels={levels} budget={budget}: {msg}", file=sys.stderr)
        print("sweep aborted; partial results above", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = load_scene_spec(Path(args.spec))
    if args.seed is not None:
        spec.seed = args.seed
    scene = generate_scene(spec)
    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = 0
    for t in range(0, spec.frames, max(1, args.export_every)):
        cloud = GaussianSet.from_positions(scene.positions[t].astype(np.float32))
        (out_dir / f"frame_{t:04d}.ply").write_bytes(write_gaussian_ply(cloud))
        written += 1
    print(f"wrote {written} frames ({scene.point_count} points each) to {out_dir}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    stream = Path(args.stream).read_bytes()
    header = codec.StreamHeader.unpack(stream)
    print(f"version={header.version} levels={header.levels} "
          f"quantization={header.quantization.name} reconfig_period={header.reconfig_period}")
    print(f"finest_fraction={header.finest_num}/{header.finest_den} "
          f"initial_gaussians={header.gaussian_count_initial}")
    offset = codec.HEADER_BYTES
    print(f"{'frame':>6} {'bytes':>8} {'anchors':>18} {'added':>6} {'pruned':>6} {'reconfig':>8}")
    while offset < len(stream):
        start = offset
        payload, offset = codec.decode_frame(stream, offset, header)
        print(f"{payload.frame_index:>6} {offset - start:>8} "
              f"{str(payload.realized_counts):>18} {len(payload.deltas.added_gaussians):>6} "
              f"{payload.deltas.pruned_indices.size:>6} {int(payload.reconfig):>8}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="anchorstream",
        description="Streaming motion codec for dynamic gaussian point sets",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    enc = sub.add_parser("encode", help="fit, serialize, and account a session")
    enc.add_argument("--input", required=True, help="scene spec (.json) or gaussian PLY")
    enc.add_argument("--output", required=True, help="output .rcgs stream path")
    enc.add_argument("--metrics", help="per-frame metrics CSV path")
    enc.add_argument("--budget", type=int, help="bytes/frame budget for anchor planning")
    enc.add_argument("--seed", type=int, help="override the scene spec seed")
    enc.add_argument("--frames", type=int, default=10,
                     help="frame count for PLY (static) inputs")
    enc.add_argument("--learning-rate", type=float, default=1e-2)
    enc.add_argument("--momentum", type=float, default=0.9)
    enc.add_argument("--coarse-to-fine", action="store_true")
    _add_config_flags(enc)
    enc.set_defaults(func=cmd_encode)

    dec = sub.add_parser("decode", help="replay a stream against its frame-0 source")
    dec.add_argument("--stream", required=True)
    dec.add_argument("--frame0", required=True, help="identical input the encoder used")
    dec.add_argument("--output-dir", help="export decoded frames as PLY here")
    dec.add_argument("--export-every", type=int, default=0,
                     help="export every k-th frame (0 = none)")
    dec.add_argument("--level-ratio", type=int, default=3)
    dec.add_argument("--mode", choices=[m.name for m in CompositionMode], default="additive")
    dec.set_defaults(func=cmd_decode)

    ben = sub.add_parser("bench", help="rate-distortion sweep over budgets")
    ben.add_argument("--spec", required=True, help="scene spec (.json)")
    ben.add_argument("--budgets", help="comma-separated bytes/frame budgets")
    ben.add_argument("--levels-sweep", help="comma-separated hierarchy depths")
    ben.add_argument("--output", help="write the table as CSV")
    ben.add_argument("--learning-rate", type=float, default=1e-2)
    ben.add_argument("--momentum", type=float, default=0.9)
    _add_config_flags(ben)
    ben.set_defaults(func=cmd_bench)

    syn = sub.add_parser("synth", help="generate a scene and export point clouds")
    syn.add_argument("--spec", required=True)
    syn.add_argument("--output-dir", required=True)
    syn.add_argument("--export-every", type=int, default=1)
    syn.add_argument("--seed", type=int)
    syn.set_defaults(func=cmd_synth)

    ins = sub.add_parser("inspect", help="dump stream header and frame sizes")
    ins.add_argument("--stream", required=True)
    ins.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except BudgetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(f"minimum feasible budget: {exc.minimum_bytes} bytes/frame", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PlyParseError, StreamFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
