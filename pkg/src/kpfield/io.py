"""File formats: point clouds, dataset manifests, checkpoints, result artifacts.

Point clouds load from ASCII PLY, binary little-endian PLY, or whitespace XYZ
text.  Extra PLY vertex properties are ignored; rows containing non-finite
coordinates are rejected with their row number.

Dataset manifests are plain text, one record per line:

    split cloud=PATH [annotations=PATH] [pair=PATH] [transform=12 floats] [scale=S]

where split is `train` or `test`, paths resolve relative to the manifest
file, `transform` is 12 comma-separated values (9 row-major rotation entries
followed by 3 translation entries) mapping this cloud into its pair
partner's frame, and `scale` is meters per canonical unit (default 1.0).
Lines starting with `#` and blank lines are skipped.

Checkpoints are a binary format: 4 magic bytes, a u32 little-endian format
version, a u64 header length, a JSON header (model config, epoch, rng state,
metadata, named array sections, payload checksum), then the raw
little-endian array payload.  Round trips are bitwise lossless.

All writers are atomic: temp file in the destination directory plus rename.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from kpfield._atomic import atomic_write_bytes, atomic_write_text
from kpfield.config import ModelConfig
from kpfield.geometry import RigidTransform, _as_points

CHECKPOINT_MAGIC = b"SNKF"
CHECKPOINT_VERSION = 1


def _r(value) -> str:
    """Full-precision decimal text for a scalar (round trips through float)."""
    return repr(float(value))


# --------------------------------------------------------------------------
# point clouds


def _reject_nonfinite_rows(points: np.ndarray, path: Path) -> None:
    bad = ~np.isfinite(points).all(axis=1)
    if bad.any():
        row = int(np.flatnonzero(bad)[0]) + 1
        raise ValueError(f"{path}: non-finite coordinates at data row {row}")


def _load_xyz(path: Path) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        tokens = stripped.split()
        if len(tokens) < 3:
            raise ValueError(f"{path}: line {lineno}: expected 3 coordinates")
        try:
            rows.append([float(t) for t in tokens[:3]])
        except ValueError:
            raise ValueError(f"{path}: line {lineno}: malformed number") from None
    if not rows:
        raise ValueError(f"{path}: no points found")
    return np.array(rows, dtype=np.float64)


_PLY_SCALARS = {
    "char": "i1",
    "int8": "i1",
    "uchar": "u1",
    "uint8": "u1",
    "short": "i2",
    "int16": "i2",
    "ushort": "u2",
    "uint16": "u2",
    "int": "i4",
    "int32": "i4",
    "uint": "u4",
    "uint32": "u4",
    "float": "f4",
    "float32": "f4",
    "double": "f8",
    "float64": "f8",
}


def _parse_ply_header(blob: bytes, path: Path):
    end = blob.find(b"end_header")
    if end < 0:
        raise ValueError(f"{path}: malformed PLY, no end_header")
    newline = blob.index(b"\n", end)
    header_lines = blob[:end].decode("ascii", errors="replace").splitlines()
    body = blob[newline + 1 :]

    fmt = None
    n_vertices = None
    vertex_props: list[tuple[str, str]] = []
    current_element = None
    for line in header_lines[1:]:
        tokens = line.split()
        if not tokens or tokens[0] == "comment":
            continue
        if tokens[0] == "format":
            fmt = tokens[1]
        elif tokens[0] == "element":
            current_element = tokens[1]
            if current_element == "vertex":
                n_vertices = int(tokens[2])
        elif tokens[0] == "property" and current_element == "vertex":
            if tokens[1] == "list":
                raise ValueError(f"{path}: list properties on vertices are unsupported")
            if tokens[1] not in _PLY_SCALARS:
                raise ValueError(f"{path}: unsupported property type {tokens[1]!r}")
            vertex_props.append((tokens[2], _PLY_SCALARS[tokens[1]]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise ValueError(
            f"{path}: unsupported PLY format {fmt!r} "
            "(ascii and binary_little_endian are supported)"
        )
    if n_vertices is None:
        raise ValueError(f"{path}: PLY has no vertex element")
    names = [name for name, _ in vertex_props]
    for axis in ("x", "y", "z"):
        if axis not in names:
            raise ValueError(f"{path}: PLY vertex element lacks property {axis!r}")
    return fmt, n_vertices, vertex_props, body


def _load_ply(path: Path) -> np.ndarray:
    blob = path.read_bytes()
    fmt, n_vertices, props, body = _parse_ply_header(blob, path)
    if n_vertices == 0:
        raise ValueError(f"{path}: no points found")
    names = [name for name, _ in props]
    cols = [names.index(a) for a in ("x", "y", "z")]
    if fmt == "ascii":
        lines = body.decode("ascii", errors="replace").splitlines()
        data_lines = [ln for ln in lines if ln.strip()][:n_vertices]
        if len(data_lines) < n_vertices:
            raise ValueError(f"{path}: truncated PLY, expected {n_vertices} vertices")
        points = np.empty((n_vertices, 3), dtype=np.float64)
        for i, line in enumerate(data_lines):
            tokens = line.split()
            if len(tokens) < len(props):
                raise ValueError(f"{path}: vertex row {i + 1} has too few values")
            try:
                points[i] = [float(tokens[c]) for c in cols]
            except ValueError:
                raise ValueError(f"{path}: vertex row {i + 1}: malformed number") from None
    else:
        dtype = np.dtype([(name, "<" + fmt_) for name, fmt_ in props])
        needed = n_vertices * dtype.itemsize
        if len(body) < needed:
            raise ValueError(f"{path}: truncated PLY, expected {needed} vertex bytes")
        table = np.frombuffer(body[:needed], dtype=dtype)
        points = np.stack(
            [table["x"], table["y"], table["z"]], axis=1
        ).astype(np.float64)
    _reject_nonfinite_rows(points, path)
    return points


def load_cloud(path: str | Path) -> np.ndarray:
    """Load raw N x 3 points from a PLY or XYZ file (sniffed by content)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"cloud file not found: {path}")
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic[:3] == b"ply":
        points = _load_ply(path)
    else:
        points = _load_xyz(path)
        _reject_nonfinite_rows(points, path)
    return points


def save_cloud(path: str | Path, points: np.ndarray, binary: bool = False) -> None:
    """Save N x 3 points as PLY (.ply, ASCII or binary LE) or XYZ text (.xyz)."""
    path = Path(path)
    pts = _as_points(points)
    if path.suffix.lower() == ".xyz":
        lines = [f"{_r(x)} {_r(y)} {_r(z)}" for x, y, z in pts]
        atomic_write_text(path, "\n".join(lines) + "\n")
        return
    if binary:
        header = (
            "ply\nformat binary_little_endian 1.0\n"
            f"element vertex {len(pts)}\n"
            "property double x\nproperty double y\nproperty double z\n"
            "end_header\n"
        )
        atomic_write_bytes(path, header.encode("ascii") + pts.astype("<f8").tobytes())
        return
    rows = [f"{_r(x)} {_r(y)} {_r(z)}" for x, y, z in pts]
    text = (
        "ply\nformat ascii 1.0\n"
        f"element vertex {len(pts)}\n"
        "property double x\nproperty double y\nproperty double z\n"
        "end_header\n" + "\n".join(rows) + "\n"
    )
    atomic_write_text(path, text)


def save_mesh(path: str | Path, vertices: np.ndarray, faces: np.ndarray) -> None:
    """Save a triangle mesh as ASCII PLY."""
    verts = _as_points(vertices) if len(vertices) else np.zeros((0, 3))
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if len(faces) and (faces.min() < 0 or faces.max() >= len(verts)):
        raise ValueError("face indices out of vertex range")
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(verts)}",
        "property double x",
        "property double y",
        "property double z",
        f"element face {len(faces)}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    lines += [f"{_r(x)} {_r(y)} {_r(z)}" for x, y, z in verts]
    lines += [f"3 {a} {b} {c}" for a, b, c in faces]
    atomic_write_text(path, "\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# keypoint and slice artifacts


def save_keypoints(
    path: str | Path,
    coords: np.ndarray,
    scores: np.ndarray,
    header: str = "",
) -> None:
    """One `x y z saliency` line per keypoint, preceded by `#` header lines."""
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if len(coords) != len(scores):
        raise ValueError("coords and scores length mismatch")
    lines = [f"# {ln}" for ln in header.splitlines() if ln.strip()]
    lines += [
        f"{_r(x)} {_r(y)} {_r(z)} {_r(s)}"
        for (x, y, z), s in zip(coords, scores)
    ]
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_keypoints(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of save_keypoints; returns (coords, scores)."""
    path = Path(path)
    coords, scores = [], []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        tokens = stripped.split()
        if len(tokens) != 4:
            raise ValueError(f"{path}: line {lineno}: expected `x y z saliency`")
        values = [float(t) for t in tokens]
        coords.append(values[:3])
        scores.append(values[3])
    return (
        np.array(coords, dtype=np.float64).reshape(-1, 3),
        np.array(scores, dtype=np.float64),
    )


def save_slice(path: str | Path, image: np.ndarray) -> None:
    """Save a 2D scalar image as .csv (full precision) or .pgm (8-bit view)."""
    path = Path(path)
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"slice image must be 2D, got shape {img.shape}")
    if path.suffix.lower() == ".csv":
        lines = [",".join(_r(v) for v in row) for row in img]
        atomic_write_text(path, "\n".join(lines) + "\n")
        return
    if path.suffix.lower() == ".pgm":
        scaled = np.clip(np.round(img * 255.0), 0, 255).astype(int)
        lines = [f"P2", f"{img.shape[1]} {img.shape[0]}", "255"]
        lines += [" ".join(str(v) for v in row) for row in scaled]
        atomic_write_text(path, "\n".join(lines) + "\n")
        return
    raise ValueError(f"unsupported slice suffix {path.suffix!r} (use .csv or .pgm)")


def load_slice_csv(path: str | Path) -> np.ndarray:
    rows = [
        [float(v) for v in line.split(",")]
        for line in Path(path).read_text().splitlines()
        if line.strip()
    ]
    return np.array(rows, dtype=np.float64)


# --------------------------------------------------------------------------
# dataset manifests


@dataclass(frozen=True)
class ManifestRecord:
    split: str
    cloud_path: Path
    annotation_path: Path | None = None
    pair_path: Path | None = None
    transform: RigidTransform | None = None
    scale: float = 1.0


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[ManifestRecord, ...] = field(default_factory=tuple)

    def split_records(self, split: str) -> tuple[ManifestRecord, ...]:
        return tuple(r for r in self.records if r.split == split)


def _parse_transform(text: str, where: str) -> RigidTransform:
    values = [float(v) for v in text.split(",")]
    if len(values) != 12:
        raise ValueError(f"{where}: transform needs 12 comma-separated values")
    rotation = np.array(values[:9], dtype=np.float64).reshape(3, 3)
    translation = np.array(values[9:], dtype=np.float64)
    return RigidTransform(rotation, translation)


def load_manifest(path: str | Path) -> DatasetManifest:
    """Parse and validate a dataset manifest (see module docstring grammar)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    root = path.parent
    records = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        where = f"{path}: line {lineno}"
        tokens = stripped.split()
        split = tokens[0]
        if split not in ("train", "test"):
            raise ValueError(f"{where}: split must be train or test, got {split!r}")
        fields_: dict[str, str] = {}
        for token in tokens[1:]:
            key, eq, value = token.partition("=")
            if not eq:
                raise ValueError(f"{where}: expected key=value, got {token!r}")
            if key not in ("cloud", "annotations", "pair", "transform", "scale"):
                raise ValueError(f"{where}: unknown field {key!r}")
            if key in fields_:
                raise ValueError(f"{where}: duplicate field {key!r}")
            fields_[key] = value
        if "cloud" not in fields_:
            raise ValueError(f"{where}: missing required field 'cloud'")

        def resolve(rel: str) -> Path:
            candidate = root / rel
            if not candidate.exists():
                raise ValueError(f"{where}: path does not exist: {candidate}")
            return candidate

        transform = None
        if "transform" in fields_:
            try:
                transform = _parse_transform(fields_["transform"], where)
            except ValueError as exc:
                raise ValueError(f"{where}: invalid transform: {exc}") from None
        records.append(
            ManifestRecord(
                split=split,
                cloud_path=resolve(fields_["cloud"]),
                annotation_path=resolve(fields_["annotations"])
                if "annotations" in fields_
                else None,
                pair_path=resolve(fields_["pair"]) if "pair" in fields_ else None,
                transform=transform,
                scale=float(fields_.get("scale", 1.0)),
            )
        )
    return DatasetManifest(tuple(records))


def load_annotations(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Load annotated keypoints: `x y z [integer label]` per line.

    Returns (coords (K,3), labels (K,) int); label defaults to 0.
    """
    path = Path(path)
    coords, labels = [], []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        tokens = stripped.split()
        if len(tokens) not in (3, 4):
            raise ValueError(f"{path}: line {lineno}: expected `x y z [label]`")
        coords.append([float(t) for t in tokens[:3]])
        labels.append(int(tokens[3]) if len(tokens) == 4 else 0)
    return (
        np.array(coords, dtype=np.float64).reshape(-1, 3),
        np.array(labels, dtype=np.int64),
    )


# --------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    """Everything needed to resume training bitwise: config, arrays, rng."""

    model_config: ModelConfig
    arrays: dict[str, np.ndarray]
    epoch: int
    rng_state: dict
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name, arr in self.arrays.items():
            if not isinstance(arr, np.ndarray) or arr.dtype.kind not in "fiu":
                raise ValueError(f"array section {name!r} must be a numeric ndarray")


def _config_to_dict(config: ModelConfig) -> dict:
    d = asdict(config)
    d["volume_resolution"] = list(d["volume_resolution"])
    return d


def save_checkpoint(path: str | Path, checkpoint: Checkpoint) -> None:
    sections = []
    payload = bytearray()
    for name, arr in checkpoint.arrays.items():
        data = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes()
        sections.append(
            {
                "name": name,
                "dtype": arr.dtype.name,
                "shape": list(arr.shape),
                "nbytes": len(data),
            }
        )
        payload += data
    header = {
        "model_config": _config_to_dict(checkpoint.model_config),
        "epoch": checkpoint.epoch,
        "rng_state": checkpoint.rng_state,
        "meta": checkpoint.meta,
        "sections": sections,
        "payload_crc32": zlib.crc32(bytes(payload)),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = (
        CHECKPOINT_MAGIC
        + struct.pack("<I", CHECKPOINT_VERSION)
        + struct.pack("<Q", len(header_bytes))
        + header_bytes
        + payload
    )
    atomic_write_bytes(path, blob)


def load_checkpoint(
    path: str | Path, expected_config: ModelConfig | None = None
) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if len(blob) < 16:
        raise ValueError(f"{path}: corrupt checkpoint (too short)")
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != CHECKPOINT_VERSION:
        raise ValueError(
            f"{path}: checkpoint format version {version} not supported "
            f"(this build reads version {CHECKPOINT_VERSION})"
        )
    (header_len,) = struct.unpack("<Q", blob[8:16])
    if 16 + header_len > len(blob):
        raise ValueError(f"{path}: corrupt checkpoint (truncated header)")
    try:
        header = json.loads(blob[16 : 16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise ValueError(f"{path}: corrupt checkpoint (unreadable header)") from None
    payload = blob[16 + header_len :]
    expected_payload = sum(s["nbytes"] for s in header["sections"])
    if len(payload) != expected_payload:
        raise ValueError(
            f"{path}: corrupt checkpoint (payload is {len(payload)} bytes, "
            f"expected {expected_payload})"
        )
    if zlib.crc32(payload) != header["payload_crc32"]:
        raise ValueError(f"{path}: corrupt checkpoint (checksum mismatch)")

    stored_config = ModelConfig(**header["model_config"])
    if expected_config is not None and stored_config != expected_config:
        raise ValueError(
            f"{path}: checkpoint was written for a different model config "
            f"({stored_config} vs requested {expected_config})"
        )
    arrays = {}
    offset = 0
    for section in header["sections"]:
        dtype = np.dtype(section["dtype"]).newbyteorder("<")
        count = int(np.prod(section["shape"], dtype=np.int64)) if section["shape"] else 1
        raw = payload[offset : offset + section["nbytes"]]
        arr = np.frombuffer(raw, dtype=dtype, count=count).reshape(section["shape"])
        arrays[section["name"]] = arr.astype(np.dtype(section["dtype"]), copy=True)
        offset += section["nbytes"]
    return Checkpoint(
        model_config=stored_config,
        arrays=arrays,
        epoch=header["epoch"],
        rng_state=header["rng_state"],
        meta=header.get("meta", {}),
    )
