"""Embedding storage: binary file format, label tables, pooling, normalization.

Binary layout (little-endian, header is exactly 23 bytes):

    magic          9B   b"OSWB-EMB1"
    version        u16  format version, currently 1
    count          u32  number of image records
    dim            u32  embedding dimension
    patch_rows     u16  patch-grid rows (0 = no patch grids)
    patch_cols     u16  patch-grid cols (0 = no patch grids)
    id block       per image: u16 byte length + UTF-8 id
    image vectors  count * dim float32
    patch grids    count * rows * cols * dim float32 (only if rows*cols > 0)

The fixed-width numeric payload makes round-trips bit-exact and files
memory-mappable. NaN/Inf anywhere in a payload is a hard parse error.

Acquisition metadata travels in a JSON-lines sidecar (one object per image),
label tables in CSV with a header row.
"""

from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

from .errors import (
    BadMagic,
    DimMismatch,
    DuplicateImageId,
    EmptyGrid,
    EmptyJoin,
    NonFiniteValue,
    ParseError,
    TruncatedFile,
    ZeroVector,
)
from ._util import sha256_hex

MAGIC = b"OSWB-EMB1"
FORMAT_VERSION = 1
HEADER_LEN = 23

# Ten-category geophysical phenomena labels, in canonical declaration order.
TENGEOP_CLASSES = (
    "pure ocean waves",
    "wind streaks",
    "micro-convective cells",
    "rain cells",
    "biological slicks",
    "sea ice",
    "icebergs",
    "low-wind areas",
    "atmospheric fronts",
    "oceanic fronts",
)

DEFAULT_FOOTPRINT_HALF_WIDTH_KM = 10.0


def parse_utc(timestamp: str) -> float:
    """Parse an ISO-8601 timestamp to epoch seconds (UTC assumed if naive)."""
    try:
        dt = datetime.fromisoformat(timestamp.replace("Z", "+00:00"))
    except ValueError as exc:
        raise ParseError(f"bad ISO-8601 timestamp {timestamp!r}: {exc}") from None
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


@dataclass(frozen=True)
class GeoMeta:
    """Acquisition metadata for one image.

    The footprint is modeled as an axis-aligned square of half-width
    ``footprint_half_width_km`` in the local tangent plane (default 10 km,
    matching ~20 km wave-mode vignettes).
    """

    timestamp: str
    lat: float
    lon: float
    footprint_half_width_km: float = DEFAULT_FOOTPRINT_HALF_WIDTH_KM

    def __post_init__(self):
        parse_utc(self.timestamp)  # raises ParseError if malformed
        if not -90.0 <= self.lat <= 90.0:
            raise ParseError(f"latitude {self.lat} out of [-90, 90]")
        if not -180.0 <= self.lon < 180.0:
            raise ParseError(f"longitude {self.lon} out of [-180, 180)")
        if not self.footprint_half_width_km > 0:
            raise ParseError("footprint_half_width_km must be positive")

    @property
    def epoch_s(self) -> float:
        return parse_utc(self.timestamp)


@dataclass(frozen=True)
class EmbeddingSet:
    """Ordered, immutable collection of image embeddings.

    ``vectors`` has shape (n, dim) float32; ``patch_grids`` is either None or
    (n, rows, cols, dim) float32. ``meta`` when present maps image_id to
    GeoMeta for co-location.
    """

    image_ids: tuple[str, ...]
    vectors: np.ndarray
    patch_grids: np.ndarray | None = None
    meta: dict[str, GeoMeta] | None = None
    dim: int = field(init=False)

    def __post_init__(self):
        vectors = np.asarray(self.vectors, dtype=np.float32)
        if vectors.ndim != 2:
            raise DimMismatch(f"vectors must be 2-D, got shape {vectors.shape}")
        n, dim = vectors.shape
        if dim < 1:
            raise DimMismatch("embedding dimension must be positive")
        if len(self.image_ids) != n:
            raise DimMismatch(
                f"{len(self.image_ids)} ids but {n} vectors"
            )
        if len(set(self.image_ids)) != n:
            seen = set()
            for i in self.image_ids:
                if i in seen:
                    raise DuplicateImageId(f"duplicate image id {i!r}")
                seen.add(i)
        if not np.all(np.isfinite(vectors)):
            raise NonFiniteValue("non-finite value in image vectors")
        object.__setattr__(self, "vectors", _frozen(vectors))
        object.__setattr__(self, "image_ids", tuple(self.image_ids))
        object.__setattr__(self, "dim", dim)
        if self.patch_grids is not None:
            grids = np.asarray(self.patch_grids, dtype=np.float32)
            if grids.ndim != 4 or grids.shape[0] != n or grids.shape[3] != dim:
                raise DimMismatch(
                    f"patch grids shape {grids.shape} incompatible with "
                    f"{n} images of dim {dim}"
                )
            if grids.shape[1] < 1 or grids.shape[2] < 1:
                raise DimMismatch("patch grid rows/cols must be positive")
            if not np.all(np.isfinite(grids)):
                raise NonFiniteValue("non-finite value in patch grids")
            object.__setattr__(self, "patch_grids", _frozen(grids))

    def __len__(self) -> int:
        return len(self.image_ids)

    @property
    def patch_shape(self) -> tuple[int, int]:
        if self.patch_grids is None:
            return (0, 0)
        return (self.patch_grids.shape[1], self.patch_grids.shape[2])

    def index_of(self, image_id: str) -> int:
        try:
            return self.image_ids.index(image_id)
        except ValueError:
            raise KeyError(image_id) from None

    def digest(self) -> str:
        """Content digest over the canonical binary serialization."""
        return sha256_hex(write_embedding_file(self))


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


# --- binary format -----------------------------------------------------------

def parse_embedding_file(data: bytes) -> EmbeddingSet:
    """Parse the binary embedding format; round-trips with write_embedding_file."""
    if len(data) < len(MAGIC) or data[: len(MAGIC)] != MAGIC:
        raise BadMagic(f"expected magic {MAGIC!r}")
    if len(data) < HEADER_LEN:
        raise TruncatedFile("header incomplete", offset=len(data))
    version, count, dim, rows, cols = struct.unpack_from("<HIIHH", data, len(MAGIC))
    if version != FORMAT_VERSION:
        raise ParseError(f"unsupported format version {version}")
    if dim < 1:
        raise DimMismatch("header dim must be positive", offset=15)
    if (rows == 0) != (cols == 0):
        raise ParseError(f"patch shape {rows}x{cols} is half-declared", offset=19)

    pos = HEADER_LEN
    ids: list[str] = []
    seen: set[str] = set()
    for _ in range(count):
        if pos + 2 > len(data):
            raise TruncatedFile("id block incomplete", offset=pos)
        (id_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        if pos + id_len > len(data):
            raise TruncatedFile("id bytes incomplete", offset=pos)
        try:
            image_id = data[pos : pos + id_len].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"id is not valid UTF-8: {exc}", offset=pos) from None
        pos += id_len
        if image_id in seen:
            raise DuplicateImageId(f"duplicate image id {image_id!r}")
        seen.add(image_id)
        ids.append(image_id)

    remaining = len(data) - pos
    row_bytes = dim * 4
    need_vec = count * row_bytes
    if remaining < need_vec:
        if remaining % row_bytes != 0:
            raise DimMismatch(
                f"vector payload ends mid-row: row needs {row_bytes} bytes",
                offset=pos + remaining,
            )
        raise TruncatedFile(
            f"vector payload has {remaining // row_bytes} of {count} rows",
            offset=pos + remaining,
        )
    vectors = np.frombuffer(data, dtype="<f4", count=count * dim, offset=pos)
    vectors = vectors.reshape(count, dim)
    pos += need_vec

    grids = None
    if rows > 0:
        need_patch = count * rows * cols * dim * 4
        if len(data) - pos < need_patch:
            raise TruncatedFile("patch payload incomplete", offset=len(data))
        grids = np.frombuffer(
            data, dtype="<f4", count=count * rows * cols * dim, offset=pos
        ).reshape(count, rows, cols, dim)
        pos += need_patch
    if pos != len(data):
        raise ParseError(f"{len(data) - pos} trailing bytes", offset=pos)

    return EmbeddingSet(image_ids=tuple(ids), vectors=vectors, patch_grids=grids)


def write_embedding_file(es: EmbeddingSet) -> bytes:
    """Serialize deterministically; identical sets produce identical bytes."""
    rows, cols = es.patch_shape
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<HIIHH", FORMAT_VERSION, len(es), es.dim, rows, cols))
    for image_id in es.image_ids:
        raw = image_id.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ParseError(f"image id longer than 65535 bytes: {image_id[:40]!r}...")
        out.write(struct.pack("<H", len(raw)))
        out.write(raw)
    out.write(np.ascontiguousarray(es.vectors, dtype="<f4").tobytes())
    if es.patch_grids is not None:
        out.write(np.ascontiguousarray(es.patch_grids, dtype="<f4").tobytes())
    return out.getvalue()


# --- metadata sidecar ---------------------------------------------------------

def write_meta_jsonl(meta: dict[str, GeoMeta], image_order: tuple[str, ...]) -> str:
    """One JSON object per image, in dataset order. Human-inspectable."""
    lines = []
    for image_id in image_order:
        m = meta[image_id]
        obj = {
            "id": image_id,
            "timestamp": m.timestamp,
            "lat": m.lat,
            "lon": m.lon,
        }
        if m.footprint_half_width_km != DEFAULT_FOOTPRINT_HALF_WIDTH_KM:
            obj["footprint_half_width_km"] = m.footprint_half_width_km
        lines.append(json.dumps(obj, sort_keys=True))
    return "\n".join(lines) + ("\n" if lines else "")


def parse_meta_jsonl(text: str) -> dict[str, GeoMeta]:
    meta: dict[str, GeoMeta] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"meta line {lineno}: {exc}") from None
        try:
            image_id = obj["id"]
            gm = GeoMeta(
                timestamp=obj["timestamp"],
                lat=float(obj["lat"]),
                lon=float(obj["lon"]),
                footprint_half_width_km=float(
                    obj.get("footprint_half_width_km", DEFAULT_FOOTPRINT_HALF_WIDTH_KM)
                ),
            )
        except KeyError as exc:
            raise ParseError(f"meta line {lineno}: missing field {exc}") from None
        if image_id in meta:
            raise DuplicateImageId(f"meta line {lineno}: duplicate id {image_id!r}")
        meta[image_id] = gm
    return meta


# --- label tables --------------------------------------------------------------

@dataclass(frozen=True)
class LabelTable:
    """image_id -> label mapping holding exactly one label kind.

    kind "class": labels are category names drawn from ``classes`` (declaration
    order is the classification tie-break order). kind "scalar": labels are
    floats with a unit tag. kind "angle": degrees in [0, 360). kind "boxes":
    labels are box lists (built by detect_eval loaders).
    """

    kind: str
    labels: dict[str, object]
    classes: tuple[str, ...] = ()
    unit: str | None = None

    def __post_init__(self):
        if self.kind not in ("class", "scalar", "angle", "boxes"):
            raise ParseError(f"unknown label kind {self.kind!r}")
        if self.kind == "class":
            if not self.classes:
                raise ParseError("class table needs a declared class set")
            allowed = set(self.classes)
            for image_id, lab in self.labels.items():
                if lab not in allowed:
                    raise ParseError(
                        f"label {lab!r} for {image_id!r} not in declared classes"
                    )
        if self.kind == "angle":
            for image_id, lab in self.labels.items():
                if not 0.0 <= float(lab) < 360.0:
                    raise ParseError(
                        f"angle {lab!r} for {image_id!r} out of [0, 360)"
                    )

    def __len__(self) -> int:
        return len(self.labels)

    def digest(self) -> str:
        canon = json.dumps(
            {
                "kind": self.kind,
                "classes": list(self.classes),
                "unit": self.unit,
                "labels": {k: self.labels[k] for k in sorted(self.labels)},
            },
            sort_keys=True,
            default=str,
        )
        return sha256_hex(canon.encode("utf-8"))


def parse_label_csv(text: str, kind: str = "class",
                    classes: tuple[str, ...] = TENGEOP_CLASSES) -> LabelTable:
    """Load a label table from CSV with header image_id,label[,unit]."""
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("label CSV is empty") from None
    if len(header) < 2 or header[0] != "image_id" or header[1] != "label":
        raise ParseError(f"label CSV header {header!r}, expected image_id,label[,unit]")
    has_unit = len(header) >= 3 and header[2] == "unit"

    labels: dict[str, object] = {}
    unit: str | None = None
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) < 2:
            raise ParseError(f"label CSV line {lineno}: needs at least 2 columns")
        image_id, raw = row[0], row[1]
        if image_id in labels:
            raise DuplicateImageId(f"label CSV line {lineno}: duplicate {image_id!r}")
        if kind == "class":
            labels[image_id] = raw
        else:
            try:
                labels[image_id] = float(raw)
            except ValueError:
                raise ParseError(
                    f"label CSV line {lineno}: {raw!r} is not a number"
                ) from None
        if has_unit and len(row) >= 3 and row[2]:
            if unit is not None and unit != row[2]:
                raise ParseError(f"label CSV line {lineno}: mixed units")
            unit = row[2]
    if kind == "class":
        return LabelTable(kind="class", labels=labels, classes=classes)
    return LabelTable(kind=kind, labels=labels, unit=unit)


def write_label_csv(table: LabelTable) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    has_unit = table.unit is not None
    writer.writerow(["image_id", "label"] + (["unit"] if has_unit else []))
    for image_id in table.labels:
        lab = table.labels[image_id]
        row = [image_id, lab if isinstance(lab, str) else repr(float(lab))]
        if has_unit:
            row.append(table.unit)
        writer.writerow(row)
    return out.getvalue()


# --- vector ops -----------------------------------------------------------------

def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Scale v to unit Euclidean norm. Raises ZeroVector below 1e-12 norm."""
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.sqrt(np.sum(v * v)))
    if norm < 1e-12:
        raise ZeroVector(f"norm {norm:g} below 1e-12")
    return v / norm


def l2_normalize_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise normalization for 2-D arrays; any zero row raises ZeroVector."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.sqrt(np.sum(x * x, axis=1))
    if np.any(norms < 1e-12):
        bad = int(np.argmin(norms))
        raise ZeroVector(f"row {bad} has norm below 1e-12")
    return x / norms[:, None]


def pool_patch_grid(grid: np.ndarray, mode: str = "max") -> np.ndarray:
    """Pool a rows x cols x dim patch grid to a dim-vector (global max or mean)."""
    grid = np.asarray(grid)
    if grid.ndim != 3 or grid.size == 0:
        raise EmptyGrid(f"expected non-empty rows x cols x dim grid, got {grid.shape}")
    flat = grid.reshape(-1, grid.shape[2]).astype(np.float64)
    if mode == "max":
        return flat.max(axis=0)
    if mode == "mean":
        return flat.mean(axis=0)
    raise ParseError(f"unknown pooling mode {mode!r}")


# --- joining --------------------------------------------------------------------

@dataclass(frozen=True)
class LabeledSet:
    """Inner join of an EmbeddingSet with a LabelTable.

    ``y`` holds class indices (int64, into ``classes``) for classification,
    or float64 targets for scalar/angle tables.
    """

    image_ids: tuple[str, ...]
    vectors: np.ndarray
    kind: str
    y: np.ndarray
    classes: tuple[str, ...] = ()
    unit: str | None = None
    n_unmatched_embeddings: int = 0
    n_unmatched_labels: int = 0

    def __post_init__(self):
        object.__setattr__(self, "vectors", _frozen(np.asarray(self.vectors)))
        object.__setattr__(self, "y", _frozen(np.asarray(self.y)))

    def __len__(self) -> int:
        return len(self.image_ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def digest(self) -> str:
        h = sha256_hex(
            ("\n".join(self.image_ids)).encode("utf-8")
            + np.ascontiguousarray(self.vectors, dtype="<f4").tobytes()
            + np.ascontiguousarray(self.y, dtype="<f8").tobytes()
        )
        return h


def join_labels(es: EmbeddingSet, table: LabelTable) -> LabeledSet:
    """Inner join on image_id, preserving embedding-set order.

    Unmatched counts on both sides are recorded on the result.
    """
    if table.kind == "boxes":
        raise ParseError("box tables join through detect_eval, not embeddings")
    matched = [i for i, image_id in enumerate(es.image_ids) if image_id in table.labels]
    if not matched:
        raise EmptyJoin(
            f"no overlap between {len(es)} embeddings and {len(table)} labels"
        )
    ids = tuple(es.image_ids[i] for i in matched)
    vectors = es.vectors[matched]
    if table.kind == "class":
        class_index = {c: j for j, c in enumerate(table.classes)}
        y = np.array([class_index[table.labels[i]] for i in ids], dtype=np.int64)
    else:
        y = np.array([float(table.labels[i]) for i in ids], dtype=np.float64)
    return LabeledSet(
        image_ids=ids,
        vectors=vectors,
        kind=table.kind,
        y=y,
        classes=table.classes,
        unit=table.unit,
        n_unmatched_embeddings=len(es) - len(ids),
        n_unmatched_labels=len(table) - len(ids),
    )
