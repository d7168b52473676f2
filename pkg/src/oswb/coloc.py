"""Co-location of SAR image metadata with altimeter/scatterometer streams.

Matchup rules follow the wave-height and wind protocols: a time gate first,
then a spatial gate, then quality-flag checks. Ambiguity between a lat/lon
box and a great-circle radius for the "within +-2 degrees" rule is resolved
as a box (|dlat| <= hw AND wrapped |dlon| <= hw); a radius gate is offered as
a configuration alternative. Flags are checked before tie-breaking.
"""

from __future__ import annotations

import csv
import io
import math
from bisect import bisect_left, bisect_right
from dataclasses import dataclass
from datetime import datetime, timezone

import numpy as np

from .embed_store import GeoMeta, parse_utc
from .errors import DegenerateDirectionMean, ParseError
from ._util import float_repr, ordered_parallel_map

EARTH_RADIUS_KM = 6371.0088

KIND_SWH = "altimeter_swh"
KIND_WIND = "scat_wind"

# Wildcard entry for require_flags_clear: every flag on the record must be clear.
ALL_FLAGS = "*"


def haversine_km(a: tuple[float, float], b: tuple[float, float]) -> float:
    """Great-circle distance in km between (lat, lon) points on a sphere."""
    lat1, lon1 = math.radians(a[0]), math.radians(a[1])
    lat2, lon2 = math.radians(b[0]), math.radians(b[1])
    dlat = lat2 - lat1
    dlon = lon2 - lon1
    h = math.sin(dlat / 2.0) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin(dlon / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(h)))


def wrap_dlon(dlon: float) -> float:
    """Longitude difference wrapped into [-180, 180]."""
    return (dlon + 180.0) % 360.0 - 180.0


@dataclass(frozen=True)
class RefMeasurement:
    """One altimeter or scatterometer record. ``flags`` holds ACTIVE flag names."""

    time_s: float
    lat: float
    lon: float
    kind: str
    swh_m: float | None = None
    wind_speed_ms: float | None = None
    wind_dir_deg: float | None = None
    flags: frozenset[str] = frozenset()

    def __post_init__(self):
        if self.kind not in (KIND_SWH, KIND_WIND):
            raise ParseError(f"unknown reference kind {self.kind!r}")
        if not -90.0 <= self.lat <= 90.0:
            raise ParseError(f"latitude {self.lat} out of range")
        if not -180.0 <= self.lon < 180.0:
            raise ParseError(f"longitude {self.lon} out of range")
        if self.kind == KIND_SWH:
            if self.swh_m is None or self.swh_m < 0:
                raise ParseError("altimeter record needs non-negative swh_m")
        else:
            if self.wind_speed_ms is None or self.wind_speed_ms < 0:
                raise ParseError("wind record needs non-negative wind_speed_ms")
            if self.wind_dir_deg is None or not 0.0 <= self.wind_dir_deg < 360.0:
                raise ParseError("wind record needs wind_dir_deg in [0, 360)")
        object.__setattr__(self, "flags", frozenset(self.flags))


# --- spatial gates ------------------------------------------------------------

@dataclass(frozen=True)
class LatLonBox:
    """|dlat| <= half_width_deg AND wrapped |dlon| <= half_width_deg."""

    half_width_deg: float

    def passes(self, img: GeoMeta, ref: RefMeasurement) -> bool:
        return (
            abs(ref.lat - img.lat) <= self.half_width_deg
            and abs(wrap_dlon(ref.lon - img.lon)) <= self.half_width_deg
        )

    def describe(self) -> str:
        return f"latlon_box_deg({float_repr(self.half_width_deg)})"


@dataclass(frozen=True)
class Footprint:
    """Axis-aligned square of the image's footprint half-width, in the local
    tangent plane centered on the image."""

    def passes(self, img: GeoMeta, ref: RefMeasurement) -> bool:
        hw = img.footprint_half_width_km
        dy = math.radians(ref.lat - img.lat) * EARTH_RADIUS_KM
        dx = (
            math.radians(wrap_dlon(ref.lon - img.lon))
            * EARTH_RADIUS_KM
            * math.cos(math.radians(img.lat))
        )
        return abs(dx) <= hw and abs(dy) <= hw

    def describe(self) -> str:
        return "footprint"


@dataclass(frozen=True)
class GreatCircle:
    """Great-circle radius gate in km."""

    radius_km: float

    def passes(self, img: GeoMeta, ref: RefMeasurement) -> bool:
        return haversine_km((img.lat, img.lon), (ref.lat, ref.lon)) <= self.radius_km

    def describe(self) -> str:
        return f"great_circle_km({float_repr(self.radius_km)})"


SpatialGate = LatLonBox | Footprint | GreatCircle


@dataclass(frozen=True)
class ColocCriteria:
    """Time window, spatial gate, flag requirements, and aggregation rule.

    tie_break "closest" retains the spatially closest candidate (ties broken
    by smaller |dt|, then reference record order). tie_break "mean" averages
    all passing candidates (vector mean for direction).
    """

    max_dt_s: int
    gate: SpatialGate
    require_flags_clear: frozenset[str] = frozenset()
    tie_break: str = "closest"

    def __post_init__(self):
        if self.max_dt_s <= 0:
            raise ParseError("max_dt_s must be positive")
        if self.tie_break not in ("closest", "mean"):
            raise ParseError(f"unknown tie_break {self.tie_break!r}")
        object.__setattr__(self, "require_flags_clear", frozenset(self.require_flags_clear))

    def flags_pass(self, ref: RefMeasurement) -> bool:
        if ALL_FLAGS in self.require_flags_clear:
            return not ref.flags
        return not (self.require_flags_clear & ref.flags)

    @classmethod
    def swh_default(cls) -> "ColocCriteria":
        """Wave-height protocol: 3 h window, +-2 deg box, no flag active, closest."""
        return cls(
            max_dt_s=10800,
            gate=LatLonBox(2.0),
            require_flags_clear=frozenset({ALL_FLAGS}),
            tie_break="closest",
        )

    @classmethod
    def wind_default(cls) -> "ColocCriteria":
        """Wind protocol: 30 min window, SAR footprint, rain flag clear, mean."""
        return cls(
            max_dt_s=1800,
            gate=Footprint(),
            require_flags_clear=frozenset({"rain_flag"}),
            tie_break="mean",
        )

    def describe(self) -> dict:
        return {
            "max_dt_s": self.max_dt_s,
            "spatial_gate": self.gate.describe(),
            "require_flags_clear": sorted(self.require_flags_clear),
            "tie_break": self.tie_break,
        }


@dataclass(frozen=True)
class Matchup:
    """One image paired with its retained (or averaged) reference value(s)."""

    image_id: str
    dt_s: float
    distance_km: float
    n_candidates: int
    swh_m: float | None = None
    wind_speed_ms: float | None = None
    wind_dir_deg: float | None = None


class SpatiotemporalIndex:
    """Time-sorted array with binary-search windows, then linear spatial filter.

    Query results are identical to a full scan; candidates come back in
    original record order so downstream tie-breaks are deterministic.
    """

    def __init__(self, refs: list[RefMeasurement] | tuple[RefMeasurement, ...]):
        order = sorted(range(len(refs)), key=lambda i: (refs[i].time_s, i))
        self._refs = [refs[i] for i in order]
        self._orig = [order[i] for i in range(len(order))]
        self._times = [r.time_s for r in self._refs]

    def __len__(self) -> int:
        return len(self._refs)

    def query_window(self, t0: float, t1: float) -> list[tuple[int, RefMeasurement]]:
        """All (original_index, ref) with t0 <= time <= t1, in record order."""
        lo = bisect_left(self._times, t0)
        hi = bisect_right(self._times, t1)
        hits = [(self._orig[i], self._refs[i]) for i in range(lo, hi)]
        hits.sort(key=lambda pair: pair[0])
        return hits


def build_index(refs) -> SpatiotemporalIndex:
    return SpatiotemporalIndex(list(refs))


def circular_mean_deg(angles_deg) -> float:
    """Unit-vector mean of full-circle angles, result in [0, 360)."""
    rad = np.radians(np.asarray(angles_deg, dtype=np.float64))
    s = float(np.mean(np.sin(rad)))
    c = float(np.mean(np.cos(rad)))
    if math.hypot(s, c) < 1e-9:
        raise DegenerateDirectionMean(
            f"direction resultant magnitude {math.hypot(s, c):.3g} below 1e-9"
        )
    return math.degrees(math.atan2(s, c)) % 360.0


def _candidates(
    image_id: str,
    img: GeoMeta,
    idx: SpatiotemporalIndex,
    criteria: ColocCriteria,
    kind: str,
) -> list[tuple[int, RefMeasurement, float, float]]:
    """Passing candidates as (record_index, ref, dt_s, distance_km)."""
    t = img.epoch_s
    out = []
    for rec_idx, ref in idx.query_window(t - criteria.max_dt_s, t + criteria.max_dt_s):
        if ref.kind != kind:
            continue
        if not criteria.flags_pass(ref):
            continue
        if not criteria.gate.passes(img, ref):
            continue
        dt = ref.time_s - t
        dist = haversine_km((img.lat, img.lon), (ref.lat, ref.lon))
        out.append((rec_idx, ref, dt, dist))
    return out


def _retain_closest(image_id, cands) -> Matchup:
    rec_idx, ref, dt, dist = min(
        cands, key=lambda c: (c[3], abs(c[2]), c[0])
    )
    return Matchup(
        image_id=image_id,
        dt_s=dt,
        distance_km=dist,
        n_candidates=len(cands),
        swh_m=ref.swh_m,
        wind_speed_ms=ref.wind_speed_ms,
        wind_dir_deg=ref.wind_dir_deg,
    )


def match_swh(
    image_id: str, img: GeoMeta, idx: SpatiotemporalIndex, criteria: ColocCriteria
) -> Matchup | None:
    """Wave-height matchup: retain the spatially closest passing altimeter record."""
    cands = _candidates(image_id, img, idx, criteria, KIND_SWH)
    if not cands:
        return None
    if criteria.tie_break == "mean":
        return Matchup(
            image_id=image_id,
            dt_s=float(np.mean([c[2] for c in cands])),
            distance_km=float(np.mean([c[3] for c in cands])),
            n_candidates=len(cands),
            swh_m=float(np.mean([c[1].swh_m for c in cands])),
        )
    return _retain_closest(image_id, cands)


def match_wind(
    image_id: str, img: GeoMeta, idx: SpatiotemporalIndex, criteria: ColocCriteria
) -> Matchup | None:
    """Wind matchup: average all passing records (arithmetic mean for speed,
    vector mean for direction); falls back to closest under that tie-break."""
    cands = _candidates(image_id, img, idx, criteria, KIND_WIND)
    if not cands:
        return None
    if criteria.tie_break == "closest":
        return _retain_closest(image_id, cands)
    return Matchup(
        image_id=image_id,
        dt_s=float(np.mean([c[2] for c in cands])),
        distance_km=float(np.mean([c[3] for c in cands])),
        n_candidates=len(cands),
        wind_speed_ms=float(np.mean([c[1].wind_speed_ms for c in cands])),
        wind_dir_deg=circular_mean_deg([c[1].wind_dir_deg for c in cands]),
    )


@dataclass(frozen=True)
class MatchupTable:
    """Matchups in input image order plus a run summary."""

    kind: str
    matchups: tuple[Matchup, ...]
    n_images: int
    criteria: ColocCriteria

    @property
    def match_rate(self) -> float:
        return len(self.matchups) / self.n_images if self.n_images else 0.0

    def summary(self, n_bins: int = 12) -> dict:
        """Match rate plus dt/distance histograms (deterministic bins)."""
        out = {
            "kind": self.kind,
            "n_images": self.n_images,
            "n_matched": len(self.matchups),
            "match_rate": self.match_rate,
            "criteria": self.criteria.describe(),
        }
        if self.matchups:
            dts = np.array([m.dt_s for m in self.matchups])
            dists = np.array([m.distance_km for m in self.matchups])
            span = float(self.criteria.max_dt_s)
            dt_counts, dt_edges = np.histogram(dts, bins=n_bins, range=(-span, span))
            d_hi = max(1e-9, float(dists.max()))
            d_counts, d_edges = np.histogram(dists, bins=n_bins, range=(0.0, d_hi))
            out["dt_s"] = {
                "mean": float(dts.mean()),
                "min": float(dts.min()),
                "max": float(dts.max()),
                "hist_counts": dt_counts.tolist(),
                "hist_edges": [float(e) for e in dt_edges],
            }
            out["distance_km"] = {
                "mean": float(dists.mean()),
                "min": float(dists.min()),
                "max": float(dists.max()),
                "hist_counts": d_counts.tolist(),
                "hist_edges": [float(e) for e in d_edges],
            }
        return out


def build_matchup_table(
    images: dict[str, GeoMeta],
    refs,
    criteria: ColocCriteria,
    kind: str,
    threads: int = 1,
) -> MatchupTable:
    """Match every image against the reference stream.

    Per-image matching is pure, so it may run on several threads; the table
    is assembled in input image order either way.
    """
    if kind not in (KIND_SWH, KIND_WIND):
        raise ParseError(f"unknown matchup kind {kind!r}")
    idx = build_index(refs)
    matcher = match_swh if kind == KIND_SWH else match_wind
    results = ordered_parallel_map(
        lambda item: matcher(item[0], item[1], idx, criteria),
        list(images.items()),
        threads=threads,
    )
    matchups = tuple(m for m in results if m is not None)
    return MatchupTable(
        kind=kind, matchups=matchups, n_images=len(images), criteria=criteria
    )


def verify_matchup_table(
    table: MatchupTable, images: dict[str, GeoMeta], refs, criteria: ColocCriteria
) -> list[str]:
    """Post-hoc verifier: every emitted matchup must re-validate against the
    criteria and against an index-free recomputation. Returns violations."""
    problems: list[str] = []
    refs = list(refs)
    idx = build_index(refs)
    matcher = match_swh if table.kind == KIND_SWH else match_wind
    by_id = {m.image_id: m for m in table.matchups}
    for image_id, img in images.items():
        expect = matcher(image_id, img, idx, criteria)
        got = by_id.get(image_id)
        if (expect is None) != (got is None):
            problems.append(f"{image_id}: match presence differs on recompute")
            continue
        if got is None:
            continue
        if abs(got.dt_s) > criteria.max_dt_s:
            problems.append(f"{image_id}: |dt| {got.dt_s} exceeds {criteria.max_dt_s}")
        if got != expect:
            problems.append(f"{image_id}: matchup differs on recompute")
    extra = set(by_id) - set(images)
    for image_id in sorted(extra):
        problems.append(f"{image_id}: matchup for unknown image")
    return problems


# --- CSV interfaces --------------------------------------------------------------

def _iso_utc(epoch_s: float) -> str:
    dt = datetime.fromtimestamp(epoch_s, tz=timezone.utc)
    return dt.strftime("%Y-%m-%dT%H:%M:%SZ")


def parse_refs_csv(text: str) -> list[RefMeasurement]:
    """Reference stream CSV: time,lat,lon,kind,swh_m,wind_speed_ms,wind_dir_deg,flags.

    Value fields not applicable to the record kind stay empty; flags are
    semicolon-joined active flag names.
    """
    reader = csv.DictReader(io.StringIO(text))
    required = {"time", "lat", "lon", "kind"}
    if reader.fieldnames is None or not required.issubset(reader.fieldnames):
        raise ParseError(f"refs CSV header must include {sorted(required)}")
    refs = []
    for lineno, row in enumerate(reader, start=2):
        def opt(name):
            raw = (row.get(name) or "").strip()
            return float(raw) if raw else None

        flags_raw = (row.get("flags") or "").strip()
        flags = frozenset(f for f in flags_raw.split(";") if f)
        try:
            refs.append(
                RefMeasurement(
                    time_s=parse_utc(row["time"]),
                    lat=float(row["lat"]),
                    lon=float(row["lon"]),
                    kind=row["kind"],
                    swh_m=opt("swh_m"),
                    wind_speed_ms=opt("wind_speed_ms"),
                    wind_dir_deg=opt("wind_dir_deg"),
                    flags=flags,
                )
            )
        except (ParseError, ValueError) as exc:
            raise ParseError(f"refs CSV line {lineno}: {exc}") from None
    return refs


def write_refs_csv(refs) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(
        ["time", "lat", "lon", "kind", "swh_m", "wind_speed_ms", "wind_dir_deg", "flags"]
    )
    for r in refs:
        writer.writerow(
            [
                _iso_utc(r.time_s),
                float_repr(r.lat),
                float_repr(r.lon),
                r.kind,
                "" if r.swh_m is None else float_repr(r.swh_m),
                "" if r.wind_speed_ms is None else float_repr(r.wind_speed_ms),
                "" if r.wind_dir_deg is None else float_repr(r.wind_dir_deg),
                ";".join(sorted(r.flags)),
            ]
        )
    return out.getvalue()


def write_matchup_csv(table: MatchupTable) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    if table.kind == KIND_SWH:
        writer.writerow(["image_id", "swh_m", "dt_s", "distance_km", "n_candidates"])
        for m in table.matchups:
            writer.writerow(
                [m.image_id, float_repr(m.swh_m), float_repr(m.dt_s),
                 float_repr(m.distance_km), m.n_candidates]
            )
    else:
        writer.writerow(
            ["image_id", "wind_speed_ms", "wind_dir_deg", "dt_s", "distance_km",
             "n_candidates"]
        )
        for m in table.matchups:
            writer.writerow(
                [m.image_id, float_repr(m.wind_speed_ms), float_repr(m.wind_dir_deg),
                 float_repr(m.dt_s), float_repr(m.distance_km), m.n_candidates]
            )
    return out.getvalue()
