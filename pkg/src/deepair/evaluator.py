"""Forecast metrics, report files and city-wide forecast maps."""

from __future__ import annotations

import bisect
import csv
import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import UndefinedMetricError
from .gridstore import Channel, ChannelSchema, UrbanDynamicsMap, save_dataset


@dataclass(frozen=True)
class PredictionRecord:
    station_id: str
    hour: int
    pollutant: str
    y_true: float
    y_pred: float


def _usable(records, floor):
    used = [r for r in records if r.y_true >= floor]
    return used, len(records) - len(used)


def mape(records, floor=1.0):
    """Mean absolute percentage error over records with ``y_true >= floor``."""
    used, _ = _usable(records, floor)
    if not used:
        raise UndefinedMetricError(f"no record has y_true >= {floor}; MAPE undefined")
    return math.fsum(abs(r.y_true - r.y_pred) / r.y_true for r in used) / len(used) * 100.0


def excluded_count(records, floor=1.0):
    return _usable(records, floor)[1]


def r_squared(records):
    if len(records) < 2:
        raise UndefinedMetricError("R^2 needs at least two records")
    y = np.array([r.y_true for r in records], np.float64)
    p = np.array([r.y_pred for r in records], np.float64)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot == 0:
        raise UndefinedMetricError("ground truth has zero variance; R^2 undefined")
    return 1.0 - float(((y - p) ** 2).sum()) / ss_tot


@dataclass
class AqiLevelTable:
    """Per-pollutant breakpoints; level k covers [b_{k-1}, b_k) with levels from 1."""

    breakpoints: dict
    source: str = ""

    def __post_init__(self):
        for name, bps in self.breakpoints.items():
            if any(nxt <= prev for prev, nxt in zip(bps, bps[1:])):
                raise ValueError(f"breakpoints for {name} are not strictly increasing")

    def level(self, pollutant, value):
        if pollutant not in self.breakpoints:
            raise KeyError(f"no AQI breakpoints for pollutant {pollutant!r}")
        return 1 + bisect.bisect_right(self.breakpoints[pollutant], value)

    @classmethod
    def load(cls, path=None):
        if path is None:
            text = resources.files("deepair.data").joinpath("aqi_breakpoints.json").read_text()
        else:
            text = Path(path).read_text()
        d = json.loads(text)
        return cls({k: [float(v) for v in vs] for k, vs in d["breakpoints"].items()},
                   d.get("source", ""))


def level_accuracy(records, table):
    if not records:
        raise UndefinedMetricError("level accuracy needs at least one record")
    hits = sum(table.level(r.pollutant, r.y_true) == table.level(r.pollutant, r.y_pred)
               for r in records)
    return 100.0 * hits / len(records)


def per_pollutant_report(records, pollutants=None, floor=1.0):
    """MAPE per pollutant; None where a pollutant has no usable record."""
    names = pollutants or list(dict.fromkeys(r.pollutant for r in records))
    table = {}
    for name in names:
        sub = [r for r in records if r.pollutant == name]
        try:
            table[name] = mape(sub, floor)
        except UndefinedMetricError:
            table[name] = None
    return table


def _safe(fn, *args):
    try:
        return fn(*args)
    except UndefinedMetricError:
        return None


def build_report(records, table=None, floor=1.0):
    table = table or AqiLevelTable.load()
    pm25 = [r for r in records if r.pollutant == "PM2.5"]
    return {
        "mape": _safe(mape, records, floor),
        "r2": _safe(r_squared, pm25 or records),
        "level_accuracy": _safe(level_accuracy, pm25 or records, table),
        "per_pollutant": per_pollutant_report(records, floor=floor),
        "excluded_count": excluded_count(records, floor),
        "records": len(records),
    }


PRED_FIELDS = ("station_id", "hour", "pollutant", "y_true", "y_pred")


def write_predictions(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PRED_FIELDS)
        for r in records:
            w.writerow([r.station_id, r.hour, r.pollutant, repr(r.y_true), repr(r.y_pred)])


def read_predictions(path):
    with open(path, newline="") as fh:
        return [PredictionRecord(row["station_id"], int(row["hour"]), row["pollutant"],
                                 float(row["y_true"]), float(row["y_pred"]))
                for row in csv.DictReader(fh)]


def write_per_pollutant(table, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("pollutant", "mape"))
        for name, v in table.items():
            w.writerow((name, "" if v is None else repr(v)))


def write_scatter(records, path, pollutant="PM2.5"):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("y_true", "y_pred"))
        for r in records:
            if r.pollutant == pollutant:
                w.writerow((repr(r.y_true), repr(r.y_pred)))


def read_scatter(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [PredictionRecord("", i, "PM2.5", float(r["y_true"]), float(r["y_pred"]))
            for i, r in enumerate(rows)]


def write_report(report, path):
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2)


def citywide_forecast(model, prep, t, chunk_cells=16):
    """Concentration forecast [pollutant, row, col] for hour ``t`` over every cell.

    Each cell is forecast from a window of patches centered on it; cells that
    host a station are filled without their own readings.
    """
    from .trainer import forecast_pairs

    if t < prep.window or t > prep.hours:
        raise UndefinedMetricError(f"hour {t} lacks a {prep.window}-hour history")
    R, C = prep.spec.rows, prep.spec.cols
    cells = [(r, c) for r in range(R) for c in range(C)]
    out = np.zeros((len(prep.aq_idx), R, C), np.float64)
    for s in range(0, len(cells), chunk_cells):
        part = cells[s:s + chunk_cells]
        pred = prep.destandardize(forecast_pairs(model, prep, [(cell, t) for cell in part]))
        for (r, c), p in zip(part, pred):
            out[:, r, c] = p
    return out


def forecast_map(prep, forecast, t):
    """Wrap a forecast array as a one-hour map in the dataset format."""
    names = prep.pollutant_names()
    schema = ChannelSchema(tuple(prep.schema.channels[i] for i in prep.aq_idx))
    values = forecast[None].astype(np.float32)
    return UrbanDynamicsMap(prep.spec, schema, prep.source.timestamp(t), values,
                            np.ones(values.shape, bool))


def write_forecast(prep, forecast, t, out_dir):
    out_dir = Path(out_dir)
    save_dataset(forecast_map(prep, forecast, t), out_dir / "forecast")
    with open(out_dir / "forecast_cells.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("pollutant", "row", "col", "value"))
        for k, name in enumerate(prep.pollutant_names()):
            for r in range(forecast.shape[1]):
                for c in range(forecast.shape[2]):
                    w.writerow((name, r, c, repr(float(forecast[k, r, c]))))
