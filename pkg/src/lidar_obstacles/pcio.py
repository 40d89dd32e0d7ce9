"""Readers and writers for PCD frames, occupancy maps (YAML + PGM), and detection records."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import yaml

from .core import Detection, PointCloud, Point3
from .errors import (
    BadMagic,
    DimensionMismatch,
    MalformedHeader,
    MaxvalUnsupported,
    TruncatedBody,
    UnsupportedDataMode,
)
from .mapping import CellState, OccupancyGrid

SCHEMA_VERSION = 1
DEFAULT_OCCUPIED_THRESH = 0.65
DEFAULT_FREE_THRESH = 0.196

# ---------------------------------------------------------------- PCD

_PCD_KEYS = ("VERSION", "FIELDS", "SIZE", "TYPE", "COUNT", "WIDTH", "HEIGHT", "VIEWPOINT", "POINTS", "DATA")
_TYPE_CODES = {"F": "f", "I": "i", "U": "u"}
_META_RE = re.compile(r"^#\s*frame_id\s+(\S+)\s+stamp\s+(\d+)\s*$")


@dataclass
class PcdHeader:
    version: str = "0.7"
    fields: list[str] = field(default_factory=lambda: ["x", "y", "z"])
    sizes: list[int] = field(default_factory=lambda: [8, 8, 8])
    types: list[str] = field(default_factory=lambda: ["F", "F", "F"])
    counts: list[int] = field(default_factory=lambda: [1, 1, 1])
    width: int = 0
    height: int = 1
    viewpoint: tuple[float, ...] = (0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0)
    points: int = 0
    data_mode: str = "binary"

    def validate(self) -> None:
        n = len(self.fields)
        if not (len(self.sizes) == len(self.types) == len(self.counts) == n):
            raise MalformedHeader("FIELDS/SIZE/TYPE/COUNT lengths differ")
        if self.width * self.height != self.points:
            raise MalformedHeader(f"WIDTH*HEIGHT={self.width * self.height} != POINTS={self.points}")
        for axis in "xyz":
            if axis not in self.fields:
                raise MalformedHeader(f"missing field {axis!r}")
            if self.types[self.fields.index(axis)] != "F":
                raise MalformedHeader(f"field {axis!r} is not floating point")
        for t, s in zip(self.types, self.sizes):
            if t not in _TYPE_CODES:
                raise MalformedHeader(f"unknown TYPE {t!r}")
            if (t == "F" and s not in (4, 8)) or (t != "F" and s not in (1, 2, 4, 8)):
                raise MalformedHeader(f"unsupported SIZE {s} for TYPE {t}")

    def dtype(self) -> np.dtype:
        parts = []
        for name, size, typ, count in zip(self.fields, self.sizes, self.types, self.counts):
            base = np.dtype(f"<{_TYPE_CODES[typ]}{size}")
            # Duplicate or placeholder names ("_") are legal in PCD; make them unique.
            key = f"{name}__{len(parts)}"
            parts.append((key, base, (count,)) if count > 1 else (key, base))
        return np.dtype(parts)

    def lines(self) -> list[str]:
        return [
            f"VERSION {self.version}",
            "FIELDS " + " ".join(self.fields),
            "SIZE " + " ".join(map(str, self.sizes)),
            "TYPE " + " ".join(self.types),
            "COUNT " + " ".join(map(str, self.counts)),
            f"WIDTH {self.width}",
            f"HEIGHT {self.height}",
            "VIEWPOINT " + " ".join(_fmt_num(v) for v in self.viewpoint),
            f"POINTS {self.points}",
            f"DATA {self.data_mode}",
        ]


def _fmt_num(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def _parse_ints(key: str, tokens: list[str]) -> list[int]:
    try:
        return [int(t) for t in tokens]
    except ValueError:
        raise MalformedHeader(f"non-integer values in {key}") from None


def parse_pcd_header(data: bytes) -> tuple[PcdHeader, int, str | None, int | None]:
    """Parse the header. Returns (header, body offset, frame_id, stamp)."""
    header = PcdHeader(fields=[], sizes=[], types=[], counts=[])
    seen: set[str] = set()
    frame_id = stamp = None
    pos = 0
    while True:
        end = data.find(b"\n", pos)
        if end < 0:
            if "DATA" in seen:
                break
            raise MalformedHeader("header ended before DATA line")
        raw = data[pos:end]
        pos = end + 1
        try:
            line = raw.decode("ascii").strip()
        except UnicodeDecodeError:
            raise MalformedHeader("non-ascii bytes in header") from None
        if not line:
            continue
        if line.startswith("#"):
            m = _META_RE.match(line)
            if m:
                frame_id, stamp = m.group(1), int(m.group(2))
            continue
        key, *tokens = line.split()
        if key not in _PCD_KEYS:
            raise MalformedHeader(f"unknown header key {key!r}")
        seen.add(key)
        if key == "VERSION":
            header.version = tokens[0] if tokens else ""
        elif key == "FIELDS":
            header.fields = tokens
        elif key == "SIZE":
            header.sizes = _parse_ints(key, tokens)
        elif key == "TYPE":
            header.types = tokens
        elif key == "COUNT":
            header.counts = _parse_ints(key, tokens)
        elif key in ("WIDTH", "HEIGHT", "POINTS"):
            vals = _parse_ints(key, tokens)
            if len(vals) != 1 or vals[0] < 0:
                raise MalformedHeader(f"{key} must be one non-negative integer")
            setattr(header, key.lower(), vals[0])
        elif key == "VIEWPOINT":
            try:
                header.viewpoint = tuple(float(t) for t in tokens)
            except ValueError:
                raise MalformedHeader("bad VIEWPOINT") from None
            if len(header.viewpoint) != 7:
                raise MalformedHeader("VIEWPOINT needs 7 values")
        elif key == "DATA":
            if len(tokens) != 1:
                raise MalformedHeader("DATA needs exactly one mode")
            header.data_mode = tokens[0]
            break
    for required in ("FIELDS", "SIZE", "TYPE", "WIDTH", "POINTS", "DATA"):
        if required not in seen:
            raise MalformedHeader(f"missing {required} line")
    if "COUNT" not in seen:
        header.counts = [1] * len(header.fields)
    if "HEIGHT" not in seen:
        header.height = 1
    if header.data_mode not in ("ascii", "binary"):
        raise UnsupportedDataMode(f"DATA {header.data_mode} is not supported")
    header.validate()
    return header, pos, frame_id, stamp


def read_pcd(data: bytes, frame_id: str = "sensor", stamp: int = 0) -> PointCloud:
    """Decode a PCD v0.7 file (ascii or binary). Fields other than x, y, z are ignored.

    A ``# frame_id <id> stamp <ns>`` comment in the header overrides the defaults.
    """
    header, offset, meta_frame, meta_stamp = parse_pcd_header(data)
    if meta_frame is not None:
        frame_id, stamp = meta_frame, meta_stamp
    n = header.points
    cols = [f"{name}__{header.fields.index(name)}" for name in "xyz"]
    if header.data_mode == "binary":
        dtype = header.dtype()
        need = n * dtype.itemsize
        if len(data) - offset < need:
            raise TruncatedBody(f"expected {need} body bytes, found {len(data) - offset}")
        if (header.fields == ["x", "y", "z"] and header.types == ["F"] * 3
                and header.sizes == [8] * 3 and header.counts == [1] * 3):
            # Plain packed doubles: read straight through (PointCloud makes the copy).
            xyz = np.frombuffer(data, dtype="<f8", count=3 * n, offset=offset).reshape(n, 3)
        else:
            rec = np.frombuffer(data, dtype=dtype, count=n, offset=offset)
            xyz = np.empty((n, 3), dtype=np.float64)
            for j, c in enumerate(cols):
                xyz[:, j] = rec[c]
    else:
        width = sum(header.counts)
        text = data[offset:].decode("ascii", errors="strict").split("\n")
        rows = [ln.split() for ln in text if ln.strip()]
        if len(rows) < n:
            raise TruncatedBody(f"expected {n} points, found {len(rows)}")
        starts = np.cumsum([0] + header.counts[:-1])
        picks = [int(starts[header.fields.index(a)]) for a in "xyz"]
        xyz = np.empty((n, 3), dtype=np.float64)
        for i in range(n):
            row = rows[i]
            if len(row) != width:
                raise MalformedHeader(f"point line {i} has {len(row)} values, expected {width}")
            try:
                xyz[i] = [float(row[p]) for p in picks]
            except ValueError:
                raise MalformedHeader(f"non-numeric value on point line {i}") from None
    return PointCloud(xyz, frame_id, stamp)


def write_pcd(cloud: PointCloud, mode: str = "binary", float_size: int = 8) -> bytes:
    """Encode ``cloud`` with fields x y z.

    ``float_size=8`` keeps binary round trips bit-exact; 4 halves the payload.
    Ascii coordinates use the shortest repr that parses back to the same double.
    """
    if mode not in ("ascii", "binary"):
        raise UnsupportedDataMode(f"cannot write DATA {mode}")
    if float_size not in (4, 8):
        raise ValueError("float_size must be 4 or 8")
    n = len(cloud)
    header = PcdHeader(sizes=[float_size] * 3, width=n, height=1, points=n, data_mode=mode)
    text = "\n".join(["# .PCD v0.7 - Point Cloud Data file format",
                      f"# frame_id {cloud.frame_id} stamp {cloud.stamp}"] + header.lines()) + "\n"
    head = text.encode("ascii")
    if mode == "binary":
        return head + cloud.xyz.astype(f"<f{float_size}").tobytes()
    body = "".join(f"{x!r} {y!r} {z!r}\n" for x, y, z in cloud.xyz.tolist())
    return head + body.encode("ascii")


def load_pcd(path: str | Path, frame_id: str = "sensor", stamp: int = 0) -> PointCloud:
    return read_pcd(Path(path).read_bytes(), frame_id, stamp)


def save_pcd(path: str | Path, cloud: PointCloud, mode: str = "binary") -> None:
    Path(path).write_bytes(write_pcd(cloud, mode))


# ---------------------------------------------------------------- occupancy maps


@dataclass(frozen=True)
class MapMetadata:
    image_path: str
    resolution: float
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    negate: int = 0
    occupied_thresh: float = DEFAULT_OCCUPIED_THRESH
    free_thresh: float = DEFAULT_FREE_THRESH
    frame_id: str = "map"

    def __post_init__(self):
        if not float(self.resolution) > 0:
            raise ValueError("resolution must be positive")
        if self.negate not in (0, 1):
            raise ValueError("negate must be 0 or 1")
        if not (0.0 <= self.free_thresh < self.occupied_thresh <= 1.0):
            raise ValueError("thresholds must satisfy 0 <= free_thresh < occupied_thresh <= 1")
        if len(self.origin) != 3:
            raise ValueError("origin must be (x, y, yaw)")

    @classmethod
    def from_dict(cls, d: dict) -> "MapMetadata":
        try:
            origin = tuple(float(v) for v in d.get("origin", (0.0, 0.0, 0.0)))
            return cls(
                image_path=str(d["image"]),
                resolution=float(d["resolution"]),
                origin=origin,
                negate=int(d.get("negate", 0)),
                occupied_thresh=float(d.get("occupied_thresh", DEFAULT_OCCUPIED_THRESH)),
                free_thresh=float(d.get("free_thresh", DEFAULT_FREE_THRESH)),
                frame_id=str(d.get("frame_id", "map")),
            )
        except KeyError as e:
            raise ValueError(f"map metadata missing key {e.args[0]!r}") from None

    def to_dict(self) -> dict:
        return {
            "image": self.image_path,
            "resolution": self.resolution,
            "origin": list(self.origin),
            "negate": self.negate,
            "occupied_thresh": self.occupied_thresh,
            "free_thresh": self.free_thresh,
            "frame_id": self.frame_id,
        }

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def _pgm_token(data: bytes, pos: int) -> tuple[bytes, int]:
    n = len(data)
    while pos < n:
        ch = data[pos:pos + 1]
        if ch == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise DimensionMismatch("PGM header ended early")
    return data[start:pos], pos


def decode_pgm(image: bytes) -> np.ndarray:
    """Binary (P5) 8-bit PGM to a (rows, cols) uint8 array, top row first."""
    if image[:2] != b"P5":
        raise BadMagic(f"expected P5 magic, got {image[:2]!r}")
    pos = 2
    values = []
    for _ in range(3):
        tok, pos = _pgm_token(image, pos)
        try:
            values.append(int(tok))
        except ValueError:
            raise DimensionMismatch(f"bad PGM header token {tok!r}") from None
    width, height, maxval = values
    if maxval != 255:
        raise MaxvalUnsupported(f"maxval {maxval} is not supported (need 255)")
    pos += 1  # single whitespace byte before raster
    body = image[pos:]
    if len(body) != width * height:
        raise DimensionMismatch(f"raster has {len(body)} bytes, header says {width}x{height}")
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width)


def encode_pgm(pixels: np.ndarray) -> bytes:
    pixels = np.asarray(pixels, dtype=np.uint8)
    height, width = pixels.shape
    return f"P5\n{width} {height}\n255\n".encode("ascii") + pixels.tobytes()


def load_occupancy_map(metadata: MapMetadata, image_bytes: bytes) -> OccupancyGrid:
    """Threshold a grayscale image into an occupancy grid.

    Image row 0 is the top of the map, i.e. grid row ``height - 1``.
    """
    pixels = decode_pgm(image_bytes).astype(np.float64)
    p = pixels / 255.0 if metadata.negate else (255.0 - pixels) / 255.0
    cells = np.full(p.shape, int(CellState.UNKNOWN), dtype=np.int8)
    cells[p > metadata.occupied_thresh] = CellState.OCCUPIED
    cells[p < metadata.free_thresh] = CellState.FREE
    height, width = cells.shape
    return OccupancyGrid(width, height, metadata.resolution, metadata.origin, cells[::-1], metadata.frame_id)


def save_occupancy_map(grid: OccupancyGrid, image_path: str = "map.pgm") -> tuple[MapMetadata, bytes]:
    pixels = np.full(grid.cells.shape, 205, dtype=np.uint8)
    pixels[grid.cells == CellState.OCCUPIED] = 0
    pixels[grid.cells == CellState.FREE] = 255
    meta = MapMetadata(image_path, grid.resolution, grid.origin, 0,
                       DEFAULT_OCCUPIED_THRESH, DEFAULT_FREE_THRESH, grid.frame_id)
    return meta, encode_pgm(pixels[::-1])


def load_map_file(yaml_path: str | Path) -> OccupancyGrid:
    """Load a map from its YAML metadata file; the image path is relative to it."""
    yaml_path = Path(yaml_path)
    meta = MapMetadata.from_dict(yaml.safe_load(yaml_path.read_text()) or {})
    image = Path(meta.image_path)
    if not image.is_absolute():
        image = yaml_path.parent / image
    return load_occupancy_map(meta, image.read_bytes())


def save_map_file(grid: OccupancyGrid, yaml_path: str | Path) -> Path:
    yaml_path = Path(yaml_path)
    image_name = yaml_path.with_suffix(".pgm").name
    meta, image = save_occupancy_map(grid, image_name)
    yaml_path.parent.mkdir(parents=True, exist_ok=True)
    (yaml_path.parent / image_name).write_bytes(image)
    yaml_path.write_text(meta.to_yaml())
    return yaml_path


# ---------------------------------------------------------------- detections


@dataclass(frozen=True)
class DetectionRecord:
    detection: Detection
    stamp: int
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        d = self.detection
        return {
            "schema_version": self.schema_version,
            "stamp": self.stamp,
            "cluster_id": d.cluster_id,
            "center": [d.center.x, d.center.y, d.center.z],
            "extents": list(d.extents),
            "yaw": d.yaw,
            "point_count": d.point_count,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "DetectionRecord":
        det = Detection(Point3(*obj["center"]), tuple(obj["extents"]), obj["yaw"],
                        obj["point_count"], obj["cluster_id"])
        return cls(det, int(obj["stamp"]), int(obj["schema_version"]))


def write_detections(records: Iterable[DetectionRecord]) -> bytes:
    """One JSON object per line; floats are written with shortest round-trip repr."""
    lines = [json.dumps(r.to_dict(), separators=(",", ":"), allow_nan=False) + "\n" for r in records]
    return "".join(lines).encode("utf-8")


def read_detections(data: bytes) -> list[DetectionRecord]:
    return [DetectionRecord.from_dict(json.loads(line))
            for line in data.decode("utf-8").splitlines() if line.strip()]
