"""Grid and channel data model, station ingestion, rasterization and storage.

Grid convention: row 0 is the northernmost row, column 0 the westernmost.
A station maps to the cell containing its equirectangular projection
relative to the grid origin (the north-west corner of cell (0, 0)).
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
from collections import OrderedDict
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import FormatError, GridError, LengthMismatchError, SizingError, VersionMismatchError

EARTH_RADIUS_KM = 6371.0088
DATASET_FORMAT = "deepair-dataset"
DATASET_VERSION = 1

GROUPS = ("air_quality", "meteorology", "traffic", "auxiliary")
POLLUTANTS = ("PM2.5", "PM10", "NO2", "CO", "O3")


@dataclass(frozen=True)
class GridSpec:
    rows: int = 50
    cols: int = 55
    cell_km: float = 3.0
    origin: tuple = (40.2, 116.0)

    def __post_init__(self):
        if self.rows < 15 or self.cols < 15:
            raise GridError(f"grid {self.rows}x{self.cols} is smaller than a 15x15 patch")
        if not self.cell_km > 0:
            raise GridError(f"cell_km must be positive, got {self.cell_km}")
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    def project(self, lat, lon):
        """Local (south, east) offsets in km from the origin corner."""
        lat0, lon0 = self.origin
        k = math.pi / 180.0 * EARTH_RADIUS_KM
        south = (lat0 - lat) * k
        east = (lon - lon0) * k * math.cos(math.radians(lat0))
        return south, east

    def cell_of(self, lat, lon):
        south, east = self.project(lat, lon)
        r = math.floor(south / self.cell_km)
        c = math.floor(east / self.cell_km)
        if not (0 <= r < self.rows and 0 <= c < self.cols):
            return None
        return r, c

    def cell_center_latlon(self, row, col):
        lat0, lon0 = self.origin
        k = math.pi / 180.0 * EARTH_RADIUS_KM
        south = (row + 0.5) * self.cell_km
        east = (col + 0.5) * self.cell_km
        return lat0 - south / k, lon0 + east / (k * math.cos(math.radians(lat0)))

    def cell_centers_km(self, cells):
        """Cell centers as (south, east) km coordinates, shape (n, 2)."""
        cells = np.asarray(cells, dtype=np.float64).reshape(-1, 2)
        return (cells + 0.5) * self.cell_km

    def to_json(self):
        return {"rows": self.rows, "cols": self.cols, "cell_km": self.cell_km,
                "origin": list(self.origin)}

    @classmethod
    def from_json(cls, d):
        return cls(int(d["rows"]), int(d["cols"]), float(d["cell_km"]), tuple(d["origin"]))


@dataclass(frozen=True)
class Channel:
    name: str
    group: str
    unit: str = ""
    categorical: bool = False


@dataclass(frozen=True)
class ChannelSchema:
    channels: tuple

    def __post_init__(self):
        chans = tuple(c if isinstance(c, Channel) else Channel(*c) for c in self.channels)
        object.__setattr__(self, "channels", chans)
        names = [c.name for c in chans]
        if len(set(names)) != len(names):
            raise GridError(f"duplicate channel names in schema: {names}")
        for c in chans:
            if c.group not in GROUPS:
                raise GridError(f"channel {c.name!r} has unknown group {c.group!r}")

    def __len__(self):
        return len(self.channels)

    @property
    def names(self):
        return [c.name for c in self.channels]

    def index(self, name):
        for i, c in enumerate(self.channels):
            if c.name == name:
                return i
        raise KeyError(name)

    def __contains__(self, name):
        return any(c.name == name for c in self.channels)

    def group_indices(self, group):
        return [i for i, c in enumerate(self.channels) if c.group == group]

    @property
    def dynamic_indices(self):
        return [i for i, c in enumerate(self.channels) if c.group != "auxiliary"]

    def digest(self):
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def to_json(self):
        return [{"name": c.name, "group": c.group, "unit": c.unit,
                 "categorical": c.categorical} for c in self.channels]

    @classmethod
    def from_json(cls, items):
        return cls(tuple(Channel(d["name"], d["group"], d.get("unit", ""),
                                 bool(d.get("categorical", False))) for d in items))


def canonical_schema():
    """The 16-channel layout: 5 pollutants, 6 meteorology, 3 traffic, 2 auxiliary."""
    return ChannelSchema((
        Channel("PM2.5", "air_quality", "ug/m3"),
        Channel("PM10", "air_quality", "ug/m3"),
        Channel("NO2", "air_quality", "ug/m3"),
        Channel("CO", "air_quality", "mg/m3"),
        Channel("O3", "air_quality", "ug/m3"),
        Channel("pressure", "meteorology", "hPa"),
        Channel("temperature", "meteorology", "degC"),
        Channel("wind_direction", "meteorology", "deg"),
        Channel("precipitation", "meteorology", "mm"),
        Channel("wind_speed", "meteorology", "m/s"),
        Channel("humidity", "meteorology", "%"),
        # free/slow/congested stored as 0/1/2
        Channel("traffic_status", "traffic", "ordinal", True),
        Channel("traffic_speed", "traffic", "km/h"),
        Channel("traffic_count", "traffic", "veh/h"),
        Channel("day_of_week", "auxiliary", "", True),
        Channel("hour_of_day", "auxiliary", "", True),
    ))


@dataclass(frozen=True)
class StationObservation:
    station_id: str
    location: tuple
    timestamp: datetime
    channel: str
    value: Optional[float]

    @property
    def missing(self):
        return self.value is None


@dataclass(frozen=True)
class RejectedRow:
    line: int
    reason: str
    raw: dict


@dataclass
class IngestResult:
    observations: list
    rejected: list

    def __iter__(self):
        return iter((self.observations, self.rejected))


CSV_FIELDS = ("station_id", "lat", "lon", "timestamp", "channel", "value")
MISSING_TOKENS = {"", "NA", "na", "NaN", "nan", "null"}


def parse_timestamp(text):
    """Parse an RFC-3339 timestamp and normalise it to UTC."""
    s = text.strip()
    if s.endswith(("Z", "z")):
        s = s[:-1] + "+00:00"
    ts = datetime.fromisoformat(s)
    if ts.tzinfo is None:
        raise ValueError("timestamp has no UTC offset")
    return ts.astimezone(timezone.utc)


def _parse_value(text):
    if text is None:
        return None
    t = text.strip()
    if t in MISSING_TOKENS:
        return None
    try:
        v = float(t)
    except ValueError:
        return None
    return v if math.isfinite(v) else None


def ingest_station_csv(rows, schema):
    """Parse station records into observations.

    ``rows`` may be a path, an open text stream, or an iterable of CSV lines
    (header first). Unknown channels and malformed timestamps or coordinates
    go to ``rejected``; unparseable values become missing observations.
    """
    if isinstance(rows, (str, os.PathLike)) and os.path.exists(rows):
        with open(rows, newline="") as fh:
            return ingest_station_csv(fh.read().splitlines(), schema)
    if isinstance(rows, str):
        rows = rows.splitlines()
    if isinstance(rows, io.IOBase):
        rows = rows.read().splitlines()

    obs, rejected = [], []
    reader = csv.DictReader(rows)
    if reader.fieldnames is None:
        return IngestResult(obs, rejected)
    missing = [f for f in CSV_FIELDS if f not in reader.fieldnames]
    if missing:
        raise FormatError(f"CSV header lacks fields {missing}")
    for rec in reader:
        line = reader.line_num
        if rec["channel"] not in schema:
            rejected.append(RejectedRow(line, f"unknown channel {rec['channel']!r}", rec))
            continue
        try:
            ts = parse_timestamp(rec["timestamp"] or "")
        except ValueError as exc:
            rejected.append(RejectedRow(line, f"malformed timestamp {rec['timestamp']!r}: {exc}", rec))
            continue
        try:
            lat, lon = float(rec["lat"]), float(rec["lon"])
        except (TypeError, ValueError):
            rejected.append(RejectedRow(line, "malformed coordinates", rec))
            continue
        obs.append(StationObservation(rec["station_id"], (lat, lon), ts, rec["channel"],
                                      _parse_value(rec["value"])))
    return IngestResult(obs, rejected)


def floor_hour(ts):
    return ts.replace(minute=0, second=0, microsecond=0)


def align_hourly(obs):
    """Average observations into wall-clock hours per (station, channel) pair.

    Every hour between the first and last reading of a pair is emitted; hours
    without a usable reading carry a missing value.
    """
    groups = OrderedDict()
    for o in obs:
        groups.setdefault((o.station_id, o.channel), []).append(o)
    out = []
    for (sid, chan), items in groups.items():
        buckets = {}
        for o in items:
            buckets.setdefault(floor_hour(o.timestamp), []).append(o.value)
        first, last = min(buckets), max(buckets)
        loc = items[0].location
        h = first
        while h <= last:
            vals = [v for v in buckets.get(h, ()) if v is not None]
            mean = math.fsum(vals) / len(vals) if vals else None
            out.append(StationObservation(sid, loc, h, chan, mean))
            h += timedelta(hours=1)
    return out


@dataclass
class UrbanDynamicsMap:
    """Hourly multi-channel grid series, values indexed [time, channel, row, col]."""

    spec: GridSpec
    schema: ChannelSchema
    start: datetime
    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if self.start.tzinfo is None:
            self.start = self.start.replace(tzinfo=timezone.utc)
        self.start = self.start.astimezone(timezone.utc)
        if floor_hour(self.start) != self.start:
            raise GridError(f"map start {self.start.isoformat()} is not on the hour")
        shape = (len(self.schema), self.spec.rows, self.spec.cols)
        if self.values.ndim != 4 or self.values.shape[1:] != shape:
            raise GridError(f"values shape {self.values.shape} does not match (T,)+{shape}")
        if self.mask.shape != self.values.shape:
            raise GridError("mask shape differs from values shape")
        if self.mask.dtype != bool:
            self.mask = self.mask.astype(bool)
        if not np.isfinite(self.values[self.mask]).all():
            raise GridError("non-finite value under a set mask")

    @classmethod
    def empty(cls, spec, schema, start, hours):
        shape = (hours, len(schema), spec.rows, spec.cols)
        return cls(spec, schema, start, np.zeros(shape, np.float32), np.zeros(shape, bool))

    @property
    def hours(self):
        return self.values.shape[0]

    def timestamp(self, t):
        return self.start + timedelta(hours=int(t))

    def hour_index(self, ts):
        return int((floor_hour(ts) - self.start) // timedelta(hours=1))

    def channel(self, name):
        return self.schema.index(name)

    def time_slice(self, t0, t1):
        """A view over hours [t0, t1) sharing storage with this map."""
        return UrbanDynamicsMap(self.spec, self.schema, self.timestamp(t0),
                                self.values[t0:t1], self.mask[t0:t1])

    def copy(self):
        return UrbanDynamicsMap(self.spec, self.schema, self.start,
                                self.values.copy(), self.mask.copy())

    def station_cells(self, channel=None):
        """Cells whose mask is ever set (optionally for one channel index)."""
        m = self.mask if channel is None else self.mask[:, channel:channel + 1]
        any_set = m.any(axis=(0, 1))
        return [tuple(int(v) for v in rc) for rc in np.argwhere(any_set)]


def rasterize(obs, spec, schema, start=None, hours=None):
    """Write hourly station observations onto the grid.

    Co-located stations reporting the same channel-hour are averaged.
    """
    obs = list(obs)
    if start is None:
        if not obs:
            raise GridError("rasterize needs a start hour when there are no observations")
        start = min(floor_hour(o.timestamp) for o in obs)
    start = floor_hour(start)
    if hours is None:
        last = max((floor_hour(o.timestamp) for o in obs), default=start)
        hours = int((last - start) // timedelta(hours=1)) + 1
    m = UrbanDynamicsMap.empty(spec, schema, start, hours)
    sums = np.zeros(m.values.shape, np.float64)
    counts = np.zeros(m.values.shape, np.int32)
    for o in obs:
        cell = spec.cell_of(*o.location)
        if cell is None:
            raise GridError(f"station {o.station_id!r} at {o.location} lies outside the "
                            f"{spec.rows}x{spec.cols} grid")
        if o.value is None:
            continue
        t = m.hour_index(o.timestamp)
        if not 0 <= t < hours:
            continue
        idx = (t, schema.index(o.channel), cell[0], cell[1])
        sums[idx] += o.value
        counts[idx] += 1
    hit = counts > 0
    m.values[hit] = (sums[hit] / counts[hit]).astype(np.float32)
    m.mask[hit] = True
    return m


def local_calendar(start, hours, utc_offset_hours=8):
    """Local day-of-week (Monday=0) and hour-of-day for hours [0, hours)."""
    local = start + timedelta(hours=utc_offset_hours)
    h = local.hour + np.arange(hours)
    hour = h % 24
    dow = (local.weekday() + h // 24) % 7
    return dow.astype(np.int64), hour.astype(np.int64)


def with_auxiliary(m, utc_offset_hours=8):
    """Copy of ``m`` with the auxiliary day/hour channels filled everywhere."""
    out = m.copy()
    aux = {m.schema.channels[i].name: i for i in m.schema.group_indices("auxiliary")}
    dow, hour = local_calendar(m.start, m.hours, utc_offset_hours)
    for name, series in (("day_of_week", dow), ("hour_of_day", hour)):
        if name in aux:
            out.values[:, aux[name]] = series[:, None, None].astype(np.float32)
            out.mask[:, aux[name]] = True
    return out


def _exact(f):
    return Fraction(repr(float(f)))


def split_bounds(total, fractions):
    f_tr, f_va, f_te = (_exact(f) for f in fractions)
    if min(f_tr, f_va, f_te) <= 0 or f_tr + f_va + f_te != 1:
        raise SizingError(f"split fractions {tuple(fractions)} must be positive and sum to 1")
    b1 = math.floor(total * f_tr)
    b2 = math.floor(total * (f_tr + f_va))
    return b1, b2


def minimum_hours(window, fractions):
    t = 3 * (window + 1)
    while True:
        b1, b2 = split_bounds(t, fractions)
        if min(b1, b2 - b1, t - b2) >= window + 1:
            return t
        t += 1


@dataclass
class DatasetSplit:
    """Chronological train/validation/test partition of one map.

    Each segment owns the targets ``[lo + window, hi)`` so that every input
    window lies inside the segment that owns its target.
    """

    map: UrbanDynamicsMap
    bounds: tuple
    window: int
    fractions: tuple = (0.8, 0.1, 0.1)

    NAMES = ("train", "validation", "test")

    def segment(self, name):
        return self.bounds[self.NAMES.index(name)]

    def view(self, name):
        lo, hi = self.segment(name)
        return self.map.time_slice(lo, hi)

    @property
    def train(self):
        return self.view("train")

    @property
    def validation(self):
        return self.view("validation")

    @property
    def test(self):
        return self.view("test")

    def targets(self, name):
        lo, hi = self.segment(name)
        return range(lo + self.window, hi)


def chronological_split(m, fractions=(0.8, 0.1, 0.1), window=48):
    total = m.hours
    b1, b2 = split_bounds(total, fractions)
    if min(b1, b2 - b1, total - b2) < window + 1:
        need = minimum_hours(window, fractions)
        raise SizingError(f"map has T={total} hours; window W={window} with fractions "
                          f"{tuple(fractions)} needs at least T={need}")
    return DatasetSplit(m, ((0, b1), (b1, b2), (b2, total)), window, tuple(fractions))


def _sha256(*blobs):
    h = hashlib.sha256()
    for b in blobs:
        h.update(b)
    return h.hexdigest()


def save_dataset(m, path):
    """Write ``manifest.json``, ``values.f32`` and ``mask.bits`` under ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    values = np.ascontiguousarray(m.values, dtype="<f4").tobytes()
    bits = np.packbits(m.mask.ravel(), bitorder="little").tobytes()
    manifest = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "spec": m.spec.to_json(),
        "schema": m.schema.to_json(),
        "start": m.start.strftime("%Y-%m-%dT%H:%M:%SZ"),
        "dtype": "float32-le",
        "shape": list(m.values.shape),
        "checksum": {"values": _sha256(values), "mask": _sha256(bits)},
    }
    (path / "values.f32").write_bytes(values)
    (path / "mask.bits").write_bytes(bits)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_dataset(path):
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError:
        raise FormatError(f"no manifest.json under {path}") from None
    if manifest.get("format") != DATASET_FORMAT or manifest.get("version") != DATASET_VERSION:
        raise VersionMismatchError(
            f"dataset {path} is {manifest.get('format')} v{manifest.get('version')}; "
            f"this build reads {DATASET_FORMAT} v{DATASET_VERSION}")
    spec = GridSpec.from_json(manifest["spec"])
    schema = ChannelSchema.from_json(manifest["schema"])
    shape = tuple(int(s) for s in manifest["shape"])
    if shape[1:] != (len(schema), spec.rows, spec.cols):
        raise LengthMismatchError(f"manifest shape {shape} disagrees with {len(schema)} channels "
                                  f"on a {spec.rows}x{spec.cols} grid")
    n = int(np.prod(shape))
    raw = (path / "values.f32").read_bytes()
    if len(raw) != 4 * n:
        raise LengthMismatchError(f"values.f32 holds {len(raw)} bytes; manifest shape {shape} "
                                  f"needs {4 * n}")
    bits = (path / "mask.bits").read_bytes()
    if len(bits) != (n + 7) // 8:
        raise LengthMismatchError(f"mask.bits holds {len(bits)} bytes; expected {(n + 7) // 8}")
    checks = manifest.get("checksum", {})
    if checks and (checks.get("values") != _sha256(raw) or checks.get("mask") != _sha256(bits)):
        raise FormatError(f"checksum mismatch in dataset {path}")
    values = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)
    mask = np.unpackbits(np.frombuffer(bits, np.uint8), count=n, bitorder="little")
    start = parse_timestamp(manifest["start"])
    return UrbanDynamicsMap(spec, schema, start, values, mask.astype(bool).reshape(shape))


def dataset_checksum(m):
    return _sha256(np.ascontiguousarray(m.values, dtype="<f4").tobytes(),
                   np.packbits(m.mask.ravel(), bitorder="little").tobytes())


def write_station_csv(obs: Iterable[StationObservation], path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_FIELDS)
        for o in obs:
            value = "NA" if o.value is None else repr(float(o.value))
            w.writerow([o.station_id, repr(o.location[0]), repr(o.location[1]),
                        o.timestamp.strftime("%Y-%m-%dT%H:%M:%SZ"), o.channel, value])


def map_to_observations(m: UrbanDynamicsMap, channels: Optional[Sequence[int]] = None):
    """Flatten a sparse map back into per-station hourly observations."""
    chans = m.schema.dynamic_indices if channels is None else channels
    out = []
    for (r, c) in m.station_cells():
        lat, lon = m.spec.cell_center_latlon(r, c)
        sid = f"S{r:03d}_{c:03d}"
        for ci in chans:
            name = m.schema.channels[ci].name
            for t in range(m.hours):
                v = float(m.values[t, ci, r, c]) if m.mask[t, ci, r, c] else None
                out.append(StationObservation(sid, (lat, lon), m.timestamp(t), name, v))
    return out
