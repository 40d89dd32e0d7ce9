"""Stage graph: read -> voxel -> floor removal -> transform -> map filter -> cluster -> box fit -> map update."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from .cluster import ClusterParams, ObbParams, euclidean_cluster, fit_obb
from .core import PointCloud, RigidTransform, transform_cloud
from .errors import ConfigError, PipelineError
from .mapping import OccupancyGrid, mark_detections
from .pcio import DetectionRecord, load_map_file, read_pcd
from .preprocess import (
    OutOfBoundsPolicy,
    RansacParams,
    VoxelParams,
    filter_by_map,
    fit_floor_ransac,
    remove_floor,
    voxel_downsample,
)

log = logging.getLogger(__name__)

_allocator_tuned = False


def tune_allocator() -> bool:
    """Keep freed frame-sized buffers inside the process (glibc only; no-op elsewhere).

    By default glibc hands large numpy temporaries back to the kernel after
    every frame, and re-faulting those pages costs a measurable share of the
    frame budget on small machines. Returns True when the settings were applied.
    """
    global _allocator_tuned
    if _allocator_tuned:
        return True
    _allocator_tuned = True
    try:
        import ctypes

        mallopt = ctypes.CDLL(None).mallopt
    except (OSError, AttributeError):
        return False
    M_TRIM_THRESHOLD, M_TOP_PAD, M_MMAP_THRESHOLD = -1, -2, -3
    ok = mallopt(M_MMAP_THRESHOLD, 32 << 20) and mallopt(M_TRIM_THRESHOLD, 128 << 20)
    ok = ok and mallopt(M_TOP_PAD, 16 << 20)
    return bool(ok)


STAGES = ("load", "voxel", "ransac", "transform", "map_filter", "cluster", "obb", "total")


@dataclass(frozen=True)
class PipelineConfig:
    voxel: VoxelParams = field(default_factory=VoxelParams)
    ransac: RansacParams = field(default_factory=RansacParams)
    cluster: ClusterParams = field(default_factory=ClusterParams)
    obb: ObbParams = field(default_factory=ObbParams)
    static_transform: RigidTransform = field(default_factory=RigidTransform)  # map <- sensor
    map_metadata_path: str | None = None
    floor_removal_enabled: bool = True
    map_filter_enabled: bool = True
    map_feedback_enabled: bool = True
    out_of_bounds_policy: str = "keep"

    def __post_init__(self):
        try:
            OutOfBoundsPolicy(self.out_of_bounds_policy)
        except ValueError:
            raise ConfigError(f"out_of_bounds_policy must be keep or drop, "
                              f"got {self.out_of_bounds_policy!r}") from None

    @classmethod
    def from_dict(cls, d: dict, base_dir: str | Path | None = None) -> "PipelineConfig":
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        sections = {"voxel": VoxelParams, "ransac": RansacParams, "cluster": ClusterParams, "obb": ObbParams}
        kwargs = {}
        try:
            for key, typ in sections.items():
                if key in d:
                    kwargs[key] = typ(**(d.pop(key) or {}))
            if "static_transform" in d:
                t = dict(d.pop("static_transform") or {})
                kwargs["static_transform"] = RigidTransform(
                    tuple(t.get("rotation", (1.0, 0.0, 0.0, 0.0))),
                    tuple(t.get("translation", (0.0, 0.0, 0.0))),
                    t.get("parent_frame", "map"),
                    t.get("child_frame", "sensor"),
                )
            path = d.pop("map_metadata_path", None)
            if path is not None and base_dir is not None and not Path(path).is_absolute():
                path = str(Path(base_dir) / path)
            kwargs["map_metadata_path"] = path
            kwargs.update(d)
            return cls(**kwargs)
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid config: {e}") from None

    def to_dict(self) -> dict:
        tf = self.static_transform
        return {
            "voxel": asdict(self.voxel),
            "ransac": asdict(self.ransac),
            "cluster": asdict(self.cluster),
            "obb": asdict(self.obb),
            "static_transform": {
                "rotation": list(tf.rotation),
                "translation": list(tf.translation),
                "parent_frame": tf.parent_frame,
                "child_frame": tf.child_frame,
            },
            "map_metadata_path": self.map_metadata_path,
            "floor_removal_enabled": self.floor_removal_enabled,
            "map_filter_enabled": self.map_filter_enabled,
            "map_feedback_enabled": self.map_feedback_enabled,
            "out_of_bounds_policy": self.out_of_bounds_policy,
        }


def load_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    return PipelineConfig.from_dict(raw or {}, base_dir=path.parent)


def dump_config(config: PipelineConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=False)


@dataclass
class FrameTiming:
    """Per-stage wall time of one frame, in microseconds."""

    load: float = 0.0
    voxel: float = 0.0
    ransac: float = 0.0
    transform: float = 0.0
    map_filter: float = 0.0
    cluster: float = 0.0
    obb: float = 0.0
    total: float = 0.0
    points_in: int = 0
    points_clustered: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class FrameError:
    index: int
    source: str
    error: str


@dataclass
class PipelineResult:
    detections: list[list[DetectionRecord]]
    final_map: OccupancyGrid | None
    timings: list[FrameTiming]
    errors: list[FrameError]

    @property
    def all_records(self) -> list[DetectionRecord]:
        return [r for frame in self.detections for r in frame]


class Pipeline:
    """Runs frames through the stage graph, carrying the working map between frames."""

    def __init__(self, config: PipelineConfig, grid: OccupancyGrid | None = None):
        tune_allocator()
        self.config = config
        self.baseline = grid
        self.grid = grid
        self._policy = OutOfBoundsPolicy(config.out_of_bounds_policy)

    def process_bytes(self, data: bytes, source: str = "<bytes>") -> tuple[list[DetectionRecord], FrameTiming]:
        clock = time.perf_counter_ns
        timing = FrameTiming()
        t0 = clock()
        cloud = read_pcd(data)
        timing.load = (clock() - t0) / 1e3
        records = self._process(cloud, timing)
        timing.total = (clock() - t0) / 1e3
        return records, timing

    def process_cloud(self, cloud: PointCloud) -> tuple[list[DetectionRecord], FrameTiming]:
        timing = FrameTiming()
        t0 = time.perf_counter_ns()
        records = self._process(cloud, timing)
        timing.total = (time.perf_counter_ns() - t0) / 1e3
        return records, timing

    def _process(self, cloud: PointCloud, timing: FrameTiming) -> list[DetectionRecord]:
        cfg = self.config
        clock = time.perf_counter_ns
        timing.points_in = len(cloud)
        mark = clock()

        def lap(stage: str) -> None:
            nonlocal mark
            now = clock()
            setattr(timing, stage, (now - mark) / 1e3)
            mark = now

        cloud = voxel_downsample(cloud, cfg.voxel)
        lap("voxel")
        if cfg.floor_removal_enabled:
            plane, _ = fit_floor_ransac(cloud, cfg.ransac)
            cloud = remove_floor(cloud, plane, cfg.ransac.distance_threshold)
        lap("ransac")
        cloud = transform_cloud(cloud, cfg.static_transform)
        lap("transform")
        if cfg.map_filter_enabled and self.grid is not None:
            cloud = filter_by_map(cloud, self.grid, self._policy)
        lap("map_filter")
        timing.points_clustered = len(cloud)
        clusters = euclidean_cluster(cloud, cfg.cluster)
        lap("cluster")
        dets = [fit_obb(cloud, c, cfg.obb, cluster_id=k) for k, c in enumerate(clusters)]
        if cfg.map_feedback_enabled and self.grid is not None and dets:
            self.grid = mark_detections(self.grid, dets)
        lap("obb")
        return [DetectionRecord(d, cloud.stamp) for d in dets]

    def run(self, frames: Sequence[str | Path]) -> PipelineResult:
        detections, timings, errors = [], [], []
        for i, path in enumerate(frames):
            try:
                data = Path(path).read_bytes()
                records, timing = self.process_bytes(data, str(path))
            except (PipelineError, OSError, ValueError) as e:
                log.warning("frame %d (%s) skipped: %s", i, path, e)
                errors.append(FrameError(i, str(path), f"{type(e).__name__}: {e}"))
                detections.append([])
                continue
            detections.append(records)
            timings.append(timing)
        return PipelineResult(detections, self.grid, timings, errors)


def resolve_map(config: PipelineConfig, map_path: str | Path | None = None) -> OccupancyGrid | None:
    """Load the map named on the command line or in the config; None when neither is set."""
    path = map_path or config.map_metadata_path
    if path is None:
        if config.map_filter_enabled:
            log.warning("no map configured; map filtration and map updates are skipped")
        return None
    try:
        return load_map_file(path)
    except (OSError, ValueError, PipelineError) as e:
        raise ConfigError(f"cannot load map {path}: {e}") from None


def run_pipeline(config: PipelineConfig, frames: Sequence[str | Path],
                 grid: OccupancyGrid | None = None) -> PipelineResult:
    """Process PCD files in order; per-frame failures are recorded and skipped."""
    if grid is None:
        grid = resolve_map(config)
    return Pipeline(config, grid).run(frames)


def _summary(values: Sequence[float]) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    return {
        "mean": float(arr.mean()),
        "median": float(np.median(arr)),
        "p95": float(np.percentile(arr, 95)),
        "max": float(arr.max()),
        "samples": int(arr.size),
    }


def bench(config: PipelineConfig, frames: Sequence[str | Path], repetitions: int,
          grid: OccupancyGrid | None = None) -> dict:
    """Time every frame ``repetitions`` times. Microsecond stats per stage.

    Each repetition starts from the same map, so detections must agree across
    repetitions; ``deterministic`` reports whether they did.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    if grid is None:
        grid = resolve_map(config)
    payloads = [Path(p).read_bytes() for p in frames]
    samples: dict[str, list[float]] = {s: [] for s in STAGES}
    points_in, points_clustered = [], []
    reference = None
    deterministic = True
    errors = []
    for _ in range(repetitions):
        pipe = Pipeline(config, grid)
        outputs = []
        for i, data in enumerate(payloads):
            try:
                records, timing = pipe.process_bytes(data, str(frames[i]))
            except (PipelineError, ValueError) as e:
                errors.append(f"frame {i}: {type(e).__name__}: {e}")
                outputs.append(None)
                continue
            outputs.append([r.to_dict() for r in records])
            for s in STAGES:
                samples[s].append(getattr(timing, s))
            points_in.append(timing.points_in)
            points_clustered.append(timing.points_clustered)
        if reference is None:
            reference = outputs
        elif outputs != reference:
            deterministic = False
    report = {
        "frames": len(payloads),
        "repetitions": repetitions,
        "unit": "us",
        "stages": {s: _summary(v) for s, v in samples.items() if v},
        "points_per_frame": _summary(points_in) if points_in else None,
        "points_clustered": _summary(points_clustered) if points_clustered else None,
        "deterministic": deterministic,
        "errors": sorted(set(errors)),
    }
    return report
