"""Synthetic LiDAR scenes: cone-FOV ray casting over a floor, boxes and pre-mapped walls.

Stands in for recorded lab data. Every frame is a deterministic function of the
scene description and its seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
import numpy as np
import yaml

from .core import Detection, Point3, PointCloud, RigidTransform, quat_multiply
from .errors import InvalidSpec
from .mapping import CellState, OccupancyGrid, mark_detections
from .pcio import DetectionRecord, save_map_file, save_pcd, write_detections

FRAME_PERIOD_NS = 100_000_000  # 10 Hz


@dataclass(frozen=True)
class BoxSpec:
    center: tuple[float, float]
    size: tuple[float, float, float]  # along yaw, across yaw, height
    yaw: float = 0.0


@dataclass(frozen=True)
class WallSpec:
    start: tuple[float, float]
    end: tuple[float, float]
    height: float = 1.0
    thickness: float = 0.1


def default_boxes() -> list[BoxSpec]:
    return [
        BoxSpec((3.0, -0.9), (0.6, 0.4, 0.5), 0.5),
        BoxSpec((4.5, 1.1), (0.5, 0.5, 0.6), 0.3),
        BoxSpec((6.0, -0.3), (0.8, 0.4, 0.4), 1.0),
    ]


def default_walls() -> list[WallSpec]:
    return [WallSpec((8.0, -4.0), (8.0, 4.0), 1.5, 0.1)]


@dataclass(frozen=True)
class SceneSpec:
    floor_extent: tuple[float, float, float, float] = (-1.0, 10.0, -6.0, 6.0)  # xmin, xmax, ymin, ymax
    floor_noise: float = 0.005
    boxes: tuple[BoxSpec, ...] = field(default_factory=lambda: tuple(default_boxes()))
    walls: tuple[WallSpec, ...] = field(default_factory=lambda: tuple(default_walls()))
    points_per_frame: int = 20000
    fov_deg: float = 70.0
    min_range: float = 0.05
    max_range: float = 12.0
    sensor_pose: tuple[float, float, float, float] = (0.0, 0.0, 1.2, 0.0)  # x, y, z, yaw
    sensor_pitch: float = math.radians(15.0)  # radians, positive tilts the cone down
    frames: int = 1
    seed: int = 0
    map_resolution: float = 0.05
    wall_margin: float = 0.1

    def validate(self) -> None:
        xmin, xmax, ymin, ymax = self.floor_extent
        if not (xmin < xmax and ymin < ymax):
            raise InvalidSpec("floor_extent must be (xmin, xmax, ymin, ymax) with min < max")
        if not 0 < self.fov_deg < 180:
            raise InvalidSpec("fov_deg must lie in (0, 180)")
        if self.points_per_frame < 0 or self.frames < 0:
            raise InvalidSpec("points_per_frame and frames must be non-negative")
        if not 0 <= self.min_range < self.max_range:
            raise InvalidSpec("need 0 <= min_range < max_range")
        if self.floor_noise < 0 or self.map_resolution <= 0 or self.wall_margin < 0:
            raise InvalidSpec("floor_noise, wall_margin must be >= 0 and map_resolution > 0")
        if self.sensor_pose[2] <= 0:
            raise InvalidSpec("sensor must sit above the floor")
        for box in self.boxes:
            if min(box.size) <= 0:
                raise InvalidSpec(f"box sizes must be positive: {box}")
        for wall in self.walls:
            if wall.height <= 0 or wall.thickness <= 0 or wall.start == wall.end:
                raise InvalidSpec(f"degenerate wall: {wall}")

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        try:
            if "boxes" in d:
                d["boxes"] = tuple(BoxSpec(tuple(b["center"]), tuple(b["size"]), float(b.get("yaw", 0.0)))
                                   for b in d["boxes"])
            if "walls" in d:
                d["walls"] = tuple(WallSpec(tuple(w["start"]), tuple(w["end"]), float(w.get("height", 1.0)),
                                            float(w.get("thickness", 0.1))) for w in d["walls"])
            for key in ("floor_extent", "sensor_pose"):
                if key in d:
                    d[key] = tuple(float(v) for v in d[key])
            spec = cls(**d)
        except (KeyError, TypeError, ValueError) as e:
            raise InvalidSpec(f"bad scene description: {e}") from None
        spec.validate()
        return spec

    def to_dict(self) -> dict:
        return {
            "floor_extent": list(self.floor_extent),
            "floor_noise": self.floor_noise,
            "boxes": [{"center": list(b.center), "size": list(b.size), "yaw": b.yaw} for b in self.boxes],
            "walls": [{"start": list(w.start), "end": list(w.end), "height": w.height,
                       "thickness": w.thickness} for w in self.walls],
            "points_per_frame": self.points_per_frame,
            "fov_deg": self.fov_deg,
            "min_range": self.min_range,
            "max_range": self.max_range,
            "sensor_pose": list(self.sensor_pose),
            "sensor_pitch": self.sensor_pitch,
            "frames": self.frames,
            "seed": self.seed,
            "map_resolution": self.map_resolution,
            "wall_margin": self.wall_margin,
        }


@dataclass
class Scene:
    spec: SceneSpec
    frames: list[PointCloud]
    grid: OccupancyGrid
    truth: list[Detection]
    sensor_tf: RigidTransform
    hits_per_object: list[np.ndarray]  # per frame: [floor, box..., wall...]


def sensor_transform(spec: SceneSpec) -> RigidTransform:
    x, y, z, yaw = spec.sensor_pose
    q_yaw = np.array([math.cos(yaw / 2), 0.0, 0.0, math.sin(yaw / 2)])
    q_pitch = np.array([math.cos(spec.sensor_pitch / 2), 0.0, math.sin(spec.sensor_pitch / 2), 0.0])
    return RigidTransform(tuple(quat_multiply(q_yaw, q_pitch)), (x, y, z), "map", "sensor")


def _wall_box(wall: WallSpec) -> tuple[np.ndarray, np.ndarray, float]:
    (x0, y0), (x1, y1) = wall.start, wall.end
    length = math.hypot(x1 - x0, y1 - y0)
    center = np.array([(x0 + x1) / 2, (y0 + y1) / 2, wall.height / 2])
    half = np.array([length / 2, wall.thickness / 2, wall.height / 2])
    return center, half, math.atan2(y1 - y0, x1 - x0)


def _solids(spec: SceneSpec) -> list[tuple[np.ndarray, np.ndarray, float]]:
    solids = []
    for box in spec.boxes:
        l, w, h = box.size
        solids.append((np.array([box.center[0], box.center[1], h / 2]), np.array([l / 2, w / 2, h / 2]), box.yaw))
    solids.extend(_wall_box(w) for w in spec.walls)
    return solids


def _ray_box(origin: np.ndarray, dirs: np.ndarray, center, half, yaw) -> np.ndarray:
    """Entry distance of each ray into a yawed box (inf when missed)."""
    c, s = math.cos(yaw), math.sin(yaw)
    rot = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])  # map -> box frame
    o = rot @ (origin - center)
    d = dirs @ rot.T
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - o) / d
        t2 = (half - o) / d
    near = np.fmax.reduce(np.fmin(t1, t2), axis=1)
    far = np.fmin.reduce(np.fmax(t1, t2), axis=1)
    hit = (near <= far) & (far > 0) & (near > 0)
    return np.where(hit, near, np.inf)


def _sample_dirs(rng: np.random.Generator, count: int, half_angle: float) -> np.ndarray:
    cos_a = rng.uniform(math.cos(half_angle), 1.0, count)
    sin_a = np.sqrt(np.maximum(0.0, 1.0 - cos_a * cos_a))
    phi = rng.uniform(0.0, 2 * math.pi, count)
    return np.stack([cos_a, sin_a * np.cos(phi), sin_a * np.sin(phi)], axis=1)


def render_frame(spec: SceneSpec, frame_index: int, tf: RigidTransform | None = None):
    """Cast rays for one frame. Returns (sensor-frame cloud, hit counts per object)."""
    tf = tf or sensor_transform(spec)
    rng = np.random.Generator(np.random.PCG64([spec.seed, frame_index]))
    origin = np.asarray(tf.translation)
    half_angle = math.radians(spec.fov_deg) / 2
    xmin, xmax, ymin, ymax = spec.floor_extent
    solids = _solids(spec)
    need = spec.points_per_frame
    chunks, labels = [], []
    got = 0
    for _ in range(64):
        if got >= need:
            break
        dirs = _sample_dirs(rng, max(1024, 2 * (need - got)), half_angle) @ tf.matrix.T
        best = np.full(dirs.shape[0], np.inf)
        label = np.full(dirs.shape[0], -1)
        with np.errstate(divide="ignore", invalid="ignore"):
            t_floor = np.where(dirs[:, 2] < 0, -origin[2] / dirs[:, 2], np.inf)
        fx = origin[0] + t_floor * dirs[:, 0]
        fy = origin[1] + t_floor * dirs[:, 1]
        on_floor = np.isfinite(t_floor) & (fx >= xmin) & (fx <= xmax) & (fy >= ymin) & (fy <= ymax)
        best = np.where(on_floor, t_floor, best)
        label[on_floor] = 0
        for k, (center, half, yaw) in enumerate(solids, start=1):
            t = _ray_box(origin, dirs, center, half, yaw)
            closer = t < best
            best = np.where(closer, t, best)
            label[closer] = k
        ok = np.isfinite(best) & (best >= spec.min_range) & (best <= spec.max_range)
        pts = origin + best[ok, None] * dirs[ok]
        lab = label[ok]
        floor = lab == 0
        pts[floor, 2] = rng.uniform(-spec.floor_noise, spec.floor_noise, int(floor.sum()))
        chunks.append(pts)
        labels.append(lab)
        got += pts.shape[0]
    if got < need:
        raise InvalidSpec(f"scene produced only {got} of {need} points; widen the floor or range")
    pts = np.concatenate(chunks)[:need] if chunks else np.empty((0, 3))
    lab = np.concatenate(labels)[:need] if labels else np.empty(0, dtype=int)
    sensor_pts = tf.inverse().apply(pts)
    cloud = PointCloud(sensor_pts, tf.child_frame, frame_index * FRAME_PERIOD_NS)
    return cloud, np.bincount(lab, minlength=len(solids) + 1)


def scene_map(spec: SceneSpec) -> OccupancyGrid:
    """Free map over the floor extent with every wall (dilated by wall_margin) occupied."""
    xmin, xmax, ymin, ymax = spec.floor_extent
    res = spec.map_resolution
    width = int(math.ceil((xmax - xmin) / res - 1e-9))
    height = int(math.ceil((ymax - ymin) / res - 1e-9))
    grid = OccupancyGrid.filled(width, height, res, (xmin, ymin, 0.0), CellState.FREE)
    walls = []
    for wall in spec.walls:
        center, half, yaw = _wall_box(wall)
        m = spec.wall_margin
        walls.append(Detection(Point3(*center), (2 * half[0] + 2 * m, 2 * half[1] + 2 * m, 2 * half[2]),
                               yaw, 1, 0))
    return mark_detections(grid, walls)


def gen_scene(spec: SceneSpec | None = None) -> Scene:
    spec = spec or SceneSpec()
    spec.validate()
    tf = sensor_transform(spec)
    frames, hits = [], []
    for i in range(spec.frames):
        cloud, counts = render_frame(spec, i, tf)
        frames.append(cloud)
        hits.append(counts)
    truth = []
    for k, box in enumerate(spec.boxes):
        l, w, h = box.size
        count = int(hits[0][k + 1]) if hits else 0
        truth.append(Detection(Point3(box.center[0], box.center[1], h / 2), (l, w, h), box.yaw,
                               max(count, 1), k))
    return Scene(spec, frames, scene_map(spec), truth, tf, hits)


def write_scene(scene: Scene, out_dir: str | Path) -> dict[str, Path]:
    """Write frames/frame_NNNN.pcd, map.yaml + map.pgm, ground_truth.jsonl and scene.yaml."""
    out = Path(out_dir)
    frames_dir = out / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)
    for i, cloud in enumerate(scene.frames):
        save_pcd(frames_dir / f"frame_{i:04d}.pcd", cloud)
    paths = {"frames": frames_dir, "map": save_map_file(scene.grid, out / "map.yaml")}
    paths["ground_truth"] = out / "ground_truth.jsonl"
    paths["ground_truth"].write_bytes(write_detections(DetectionRecord(d, 0) for d in scene.truth))
    paths["scene"] = out / "scene.yaml"
    paths["scene"].write_text(yaml.safe_dump(scene.spec.to_dict(), sort_keys=False))
    return paths
