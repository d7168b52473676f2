"""Patch-similarity maps: cosine similarity of every patch to a reference patch.

Exports are an 8-bit binary portable graymap (dependency-free, bit-exact
golden tests) plus a full-precision CSV grid. Cosine values are clamped to
[-1, 1] after computation to absorb floating-point drift. Display
normalization is not prescribed, so both fixed-range and min-max scaling are
available.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateRange, EmptyGrid, ParseError, RefOutOfBounds, ZeroVector
from ._util import float_repr


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """dot(a, b) / (|a||b|), clamped into [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = float(np.sqrt(np.sum(a * a)))
    nb = float(np.sqrt(np.sum(b * b)))
    if na < 1e-12 or nb < 1e-12:
        raise ZeroVector("cosine similarity of a (near-)zero vector is undefined")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


@dataclass(frozen=True)
class SimilarityMap:
    rows: int
    cols: int
    values: np.ndarray  # (rows, cols) float64 in [-1, 1]
    ref: tuple[int, int]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != (self.rows, self.cols):
            raise ParseError(f"values shape {values.shape} != ({self.rows},{self.cols})")
        values = np.ascontiguousarray(values)
        values.flags.writeable = False
        object.__setattr__(self, "values", values)


def similarity_map(grid: np.ndarray, ref: tuple[int, int]) -> SimilarityMap:
    """Cosine similarity of every patch embedding to the patch at ``ref``.

    Zero-norm patches other than the reference map to similarity 0.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 3 or grid.size == 0:
        raise EmptyGrid(f"expected non-empty rows x cols x dim grid, got {grid.shape}")
    rows, cols, dim = grid.shape
    r, c = ref
    if not (0 <= r < rows and 0 <= c < cols):
        raise RefOutOfBounds(f"reference ({r},{c}) outside {rows}x{cols} grid")
    ref_vec = grid[r, c]
    ref_norm = float(np.sqrt(np.sum(ref_vec * ref_vec)))
    if ref_norm < 1e-12:
        raise ZeroVector(f"reference patch ({r},{c}) has (near-)zero norm")
    flat = grid.reshape(-1, dim)
    norms = np.sqrt(np.sum(flat * flat, axis=1))
    safe = np.where(norms < 1e-12, 1.0, norms)
    sims = (flat @ ref_vec) / (safe * ref_norm)
    sims = np.where(norms < 1e-12, 0.0, sims)
    sims = np.clip(sims, -1.0, 1.0).reshape(rows, cols)
    return SimilarityMap(rows=rows, cols=cols, values=sims, ref=(r, c))


def export_map(
    smap: SimilarityMap, normalization: str = "none"
) -> tuple[bytes, str]:
    """(PGM bytes, CSV text) for a similarity map.

    PGM is binary P5 8-bit: v -> round(255 * (v - lo) / (hi - lo)) with
    (lo, hi) = (-1, 1) for "none" or the observed range for "minmax". The CSV
    carries full-precision values; both record the reference as "# ref=r,c".
    """
    if normalization == "none":
        lo, hi = -1.0, 1.0
    elif normalization == "minmax":
        lo = float(smap.values.min())
        hi = float(smap.values.max())
        if hi == lo:
            raise DegenerateRange("all map values equal; min-max scaling undefined")
    else:
        raise ParseError(f"unknown normalization {normalization!r}")

    scaled = 255.0 * (smap.values - lo) / (hi - lo)
    pixels = np.clip(np.floor(scaled + 0.5), 0, 255).astype(np.uint8)
    header = f"P5\n# ref={smap.ref[0]},{smap.ref[1]}\n{smap.cols} {smap.rows}\n255\n"
    pgm = header.encode("ascii") + pixels.tobytes()

    out = io.StringIO()
    out.write(f"# ref={smap.ref[0]},{smap.ref[1]}\n")
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["row", "col", "value"])
    for r in range(smap.rows):
        for c in range(smap.cols):
            writer.writerow([r, c, float_repr(smap.values[r, c])])
    return pgm, out.getvalue()


def parse_map_csv(text: str) -> SimilarityMap:
    """Re-read an exported CSV grid losslessly."""
    lines = text.splitlines()
    if not lines or not lines[0].startswith("# ref="):
        raise ParseError("map CSV must start with '# ref=r,c'")
    try:
        r, c = (int(v) for v in lines[0][len("# ref=") :].split(","))
    except ValueError:
        raise ParseError(f"bad reference line {lines[0]!r}") from None
    reader = csv.reader(io.StringIO("\n".join(lines[1:])))
    header = next(reader, None)
    if header != ["row", "col", "value"]:
        raise ParseError(f"map CSV header {header!r}")
    cells: dict[tuple[int, int], float] = {}
    for row in reader:
        if not row:
            continue
        cells[(int(row[0]), int(row[1]))] = float(row[2])
    if not cells:
        raise ParseError("map CSV has no cells")
    rows = max(k[0] for k in cells) + 1
    cols = max(k[1] for k in cells) + 1
    values = np.empty((rows, cols))
    for (i, j), v in cells.items():
        values[i, j] = v
    return SimilarityMap(rows=rows, cols=cols, values=values, ref=(r, c))


def parse_pgm(data: bytes) -> tuple[np.ndarray, tuple[int, int] | None]:
    """Parse binary P5 output back to (pixel array, reference or None)."""
    if not data.startswith(b"P5"):
        raise ParseError("not a binary P5 graymap")
    pos = 2
    tokens: list[bytes] = []
    ref = None
    while len(tokens) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            end = data.index(b"\n", pos)
            comment = data[pos:end].decode("ascii").strip()
            if comment.startswith("# ref="):
                r, c = (int(v) for v in comment[len("# ref=") :].split(","))
                ref = (r, c)
            pos = end + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    cols, rows, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise ParseError(f"expected 8-bit graymap, got maxval {maxval}")
    pos += 1  # single whitespace after maxval
    pixels = np.frombuffer(data, dtype=np.uint8, count=rows * cols, offset=pos)
    return pixels.reshape(rows, cols), ref
