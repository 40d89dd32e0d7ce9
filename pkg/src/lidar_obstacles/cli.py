"""Command-line entry point: run, bench, render, gen-scene, map-reset.

Exit codes: 0 success, 1 fatal config/IO error, 2 finished but some frames were skipped.
"""

from __future__ import annotations

import argparse
import glob
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import yaml

from .core import transform_cloud
from .errors import PipelineError
from .mapping import reset
from .pcio import load_map_file, read_pcd, save_map_file, write_detections
from .pipeline import Pipeline, PipelineConfig, bench, dump_config, load_config, resolve_map
from .render import render_topdown
from .scene import SceneSpec, gen_scene, write_scene

log = logging.getLogger("lidar_obstacles")

EXIT_OK, EXIT_FATAL, EXIT_SKIPPED = 0, 1, 2


class Fatal(Exception):
    """Configuration or I/O problem that stops the command."""


def _config(args) -> PipelineConfig:
    config = load_config(args.config) if args.config else PipelineConfig()
    if getattr(args, "seed", None) is not None:
        config = replace(config, ransac=replace(config.ransac, seed=args.seed))
    if getattr(args, "stateless", False):
        config = replace(config, map_feedback_enabled=False)
    return config


def _frames(pattern: str | None) -> list[Path]:
    if not pattern:
        raise Fatal("--frames is required")
    paths = sorted(Path(p) for p in glob.glob(pattern))
    if not paths:
        raise Fatal(f"no frames match {pattern!r}")
    return paths


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise Fatal(f"cannot create {out}: {e}") from None
    return out


def cmd_run(args) -> int:
    config = _config(args)
    frames = _frames(args.frames)
    out = _out_dir(args)
    grid = resolve_map(config, args.map)
    result = Pipeline(config, grid).run(frames)
    (out / "detections.jsonl").write_bytes(write_detections(result.all_records))
    (out / "timings.json").write_text(json.dumps([t.as_dict() for t in result.timings], indent=1))
    if result.final_map is not None:
        save_map_file(result.final_map, out / "final_map.yaml")
    n_det = len(result.all_records)
    print(f"{len(frames)} frames, {len(result.errors)} skipped, {n_det} detections -> {out}")
    for err in result.errors:
        print(f"  skipped frame {err.index} ({err.source}): {err.error}", file=sys.stderr)
    return EXIT_SKIPPED if result.errors else EXIT_OK


def cmd_bench(args) -> int:
    config = _config(args)
    frames = _frames(args.frames)
    grid = resolve_map(config, args.map)
    report = bench(config, frames, args.reps, grid)
    text = json.dumps(report, indent=2)
    if args.out:
        (_out_dir(args) / "bench.json").write_text(text + "\n")
    print(text)
    return EXIT_SKIPPED if report["errors"] else EXIT_OK


def cmd_render(args) -> int:
    config = _config(args)
    frames = _frames(args.frames)
    out = _out_dir(args)
    pipe = Pipeline(config, resolve_map(config, args.map))
    skipped = 0
    for path in frames:
        try:
            cloud = read_pcd(path.read_bytes())
            # Draw against the map the frame was filtered with, before its own detections land.
            grid = pipe.grid
            records, _ = pipe.process_cloud(cloud)
            view = transform_cloud(cloud, config.static_transform)
        except (PipelineError, OSError, ValueError) as e:
            log.warning("frame %s skipped: %s", path, e)
            skipped += 1
            continue
        target = render_topdown(view, [r.detection for r in records], grid, out / f"{path.stem}.ppm")
        print(target)
    return EXIT_SKIPPED if skipped else EXIT_OK


def cmd_gen_scene(args) -> int:
    if args.config:
        try:
            raw = yaml.safe_load(Path(args.config).read_text()) or {}
        except (OSError, yaml.YAMLError) as e:
            raise Fatal(f"cannot read scene description {args.config}: {e}") from None
        spec = SceneSpec.from_dict(raw)
    else:
        spec = SceneSpec()
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    out = _out_dir(args)
    scene = gen_scene(spec)
    paths = write_scene(scene, out)
    config = PipelineConfig(static_transform=scene.sensor_tf, map_metadata_path=paths["map"].name)
    (out / "config.yaml").write_text(dump_config(config))
    print(f"{len(scene.frames)} frames, {len(scene.truth)} boxes -> {out}")
    return EXIT_OK


def cmd_map_reset(args) -> int:
    """Replace the working map in --out with the baseline map."""
    config = _config(args)
    baseline = resolve_map(config, args.map)
    if baseline is None:
        raise Fatal("map-reset needs a baseline map (--map or map_metadata_path in --config)")
    out = _out_dir(args)
    working = out / "final_map.yaml"
    current = load_map_file(working) if working.exists() else baseline
    save_map_file(reset(current, baseline), working)
    print(f"reset {working}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lidar-obstacles", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help, frames=True, out_required=True):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", metavar="PATH", help="pipeline config (YAML)")
        p.add_argument("--map", metavar="PATH", help="map metadata YAML; overrides the config")
        p.add_argument("--out", metavar="DIR", required=out_required, help="output directory")
        if frames:
            p.add_argument("--frames", metavar="GLOB", required=True, help="PCD frames, processed in sorted order")
        p.set_defaults(func=func)
        return p

    p = add("run", cmd_run, "process frames; write detections, final map and timings")
    p.add_argument("--stateless", action="store_true", help="do not feed detections back into the map")
    p.add_argument("--seed", type=int, help="override the RANSAC seed")

    p = add("bench", cmd_bench, "per-stage latency over repeated runs", out_required=False)
    p.add_argument("--reps", type=int, default=100, metavar="N", help="repetitions (default 100)")
    p.add_argument("--stateless", action="store_true")
    p.add_argument("--seed", type=int)

    p = add("render", cmd_render, "top-down PPM image per frame")
    p.add_argument("--stateless", action="store_true")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("gen-scene", help="write a synthetic scene (frames, map, ground truth, config)")
    p.add_argument("--config", metavar="PATH", help="scene description (YAML); defaults if omitted")
    p.add_argument("--out", metavar="DIR", required=True)
    p.add_argument("--seed", type=int, metavar="N")
    p.set_defaults(func=cmd_gen_scene)

    add("map-reset", cmd_map_reset, "restore the working map in --out to the baseline", frames=False)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "reps", 1) < 1:
        print("error: --reps must be >= 1", file=sys.stderr)
        return EXIT_FATAL
    try:
        return args.func(args)
    except (Fatal, PipelineError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
