"""Preprocessing state and leave-one-out patch windows.

:func:`preprocess` turns a sparse station map into everything the trainer
and evaluator need: temporally interpolated, standardized station values,
the correlation-gated fill policy, fitted variograms and the chronological
split. :class:`PatchFiller` then builds spatially filled patches on demand,
excluding the target cell's own readings when asked.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import interp
from .errors import InsufficientDataError, SizingError
from .gridstore import chronological_split, local_calendar
from .model import WindowBatch
from .tensorcore import Tensor

log = logging.getLogger(__name__)


@dataclass
class PrepConfig:
    window: int = 48
    patch: int = 15
    max_gap: int = 6
    threshold: float = 0.6
    bins: int = 12
    krige_scope: str = "patch"
    utc_offset_hours: int = 8
    fractions: tuple = (0.8, 0.1, 0.1)
    # keep each station's filled patch series in memory after first use
    cache_series: bool = False


@dataclass
class PrepState:
    """The fitted, data-dependent part of preprocessing (serialisable)."""

    mean: np.ndarray
    std: np.ndarray
    policy: interp.FillPolicy
    variograms: dict
    report: interp.CorrelationReport

    def to_json(self):
        return {
            "mean": [float(v) for v in self.mean],
            "std": [float(v) for v in self.std],
            "policy": self.policy.to_json(),
            "variograms": {k: v.to_json() for k, v in self.variograms.items()},
            "report": self.report.to_json(self.policy),
        }

    @classmethod
    def from_json(cls, d):
        rep = d["report"]
        report = interp.CorrelationReport({k: v["r"] for k, v in rep.items()},
                                          {k: v["pairs"] for k, v in rep.items()})
        return cls(np.asarray(d["mean"], np.float64), np.asarray(d["std"], np.float64),
                   interp.FillPolicy.from_json(d["policy"]),
                   {k: interp.Variogram.from_json(v) for k, v in d["variograms"].items()},
                   report)


class PreparedData:
    """Standardized, temporally interpolated station data plus fill machinery."""

    def __init__(self, source, config, state=None):
        self.source = source
        self.config = config
        self.schema = source.schema
        self.spec = source.spec
        self.split = chronological_split(source, config.fractions, config.window)
        self.dyn_idx = self.schema.dynamic_indices
        self.aq_idx = self.schema.group_indices("air_quality")
        self.dyn_names = [self.schema.channels[i].name for i in self.dyn_idx]
        # positions of the pollutant channels inside the dynamic-channel axis
        self.aq_pos = [self.dyn_idx.index(i) for i in self.aq_idx]

        filled = interp.interpolate_map_temporal(source, config.max_gap, self.dyn_idx)
        self.values = filled.values[:, self.dyn_idx].astype(np.float64)
        self.mask = filled.mask[:, self.dyn_idx].copy()
        self.truth_values = source.values[:, self.aq_idx]
        self.truth_mask = source.mask[:, self.aq_idx]

        lo, hi = self.split.segment("train")
        if state is None:
            state = self._fit_state(filled, lo, hi)
        self.state = state
        self.std_values = ((self.values - state.mean[None, :, None, None])
                           / state.std[None, :, None, None]).astype(np.float32)
        self.std_values[~self.mask] = 0.0

        self.dow, self.hour = local_calendar(source.start, source.hours, config.utc_offset_hours)
        any_aq = source.mask[:, self.aq_idx].any(axis=(0, 1))
        self.stations = [tuple(int(v) for v in rc) for rc in np.argwhere(any_aq)]
        self.station_set = set(self.stations)
        all_obs = source.mask[:, self.dyn_idx].any(axis=(0, 1))
        self.observed_cells = set(tuple(int(v) for v in rc) for rc in np.argwhere(all_obs))
        self.filler = PatchFiller(self)

    def _fit_state(self, filled, lo, hi):
        seg = self.mask[lo:hi]
        mean = np.zeros(len(self.dyn_idx))
        std = np.ones(len(self.dyn_idx))
        for k in range(len(self.dyn_idx)):
            v = self.values[lo:hi, k][seg[:, k]]
            if v.size:
                mean[k] = v.mean()
                s = v.std()
                std[k] = s if s > 0 else 1.0
        report = interp.correlation_report(filled, lo, hi, self.dyn_idx)
        policy = interp.build_fill_policy(report, self.config.threshold, self.schema)
        variograms = {}
        for k, name in enumerate(self.dyn_names):
            if policy.methods[name] != interp.KRIGE:
                continue
            cells = np.argwhere(self.mask[lo:hi, k].any(axis=0))
            z = (self.values[lo:hi, k][:, cells[:, 0], cells[:, 1]] - mean[k]) / std[k]
            z = np.where(self.mask[lo:hi, k][:, cells[:, 0], cells[:, 1]], z, np.nan)
            try:
                variograms[name] = interp.fit_variogram(self.spec.cell_centers_km(cells), z,
                                                        self.config.bins)
            except InsufficientDataError as exc:
                log.warning("channel %s falls back to zero fill: %s", name, exc)
                policy.methods[name] = interp.ZERO_FILL
        return PrepState(mean, std, policy, variograms, report)

    @property
    def hours(self):
        return self.source.hours

    @property
    def window(self):
        return self.config.window

    def pollutant_names(self):
        return [self.schema.channels[i].name for i in self.aq_idx]

    def target_std(self, cell, t):
        """Standardized pollutant vector used as a training target, or None."""
        r, c = cell
        m = self.mask[t, self.aq_pos, r, c]
        if not m.all():
            return None
        return self.std_values[t, self.aq_pos, r, c].copy()

    def truth(self, cell, t):
        """Originally observed pollutant values at ``cell``/``t`` (NaN where absent)."""
        r, c = cell
        return np.where(self.truth_mask[t, :, r, c], self.truth_values[t, :, r, c], np.nan)

    def destandardize(self, pred):
        """Standardized pollutant predictions -> concentrations, clamped at 0."""
        mean = self.state.mean[self.aq_pos]
        std = self.state.std[self.aq_pos]
        return np.maximum(np.asarray(pred, np.float64) * std + mean, 0.0)

    def loo_exclude(self, cell):
        return cell if cell in self.observed_cells else None

    def window_batch(self, cells, t_targets, exclude=True):
        """Input windows (hours t-W .. t-1) for each (cell, target hour) pair."""
        w = self.window
        dyn, dows, hrs, hours = [], [], [], []
        for cell, t in zip(cells, t_targets):
            if t < w or t > self.hours:
                raise SizingError(f"target hour {t} lacks a full {w}-hour history")
            span = np.arange(t - w, t)
            ex = self.loo_exclude(cell) if exclude else None
            dyn.append(self.filler.window(cell, span, ex))
            dows.append(self.dow[span])
            hrs.append(self.hour[span])
            hours.append(span)
        return WindowBatch(np.stack(dyn), np.stack(dows), np.stack(hrs), np.stack(hours),
                           list(cells))


class PatchFiller:
    """Builds spatially filled P x P patches from the standardized station data.

    Krige channels are interpolated from the observed cells inside the patch
    footprint (or the whole city with ``krige_scope='city'``); zero-fill
    channels are 0 away from observed cells. Cells outside the map are 0.
    """

    def __init__(self, prep):
        self.prep = prep
        self.patch = prep.config.patch
        self.half = self.patch // 2
        self.scope = prep.config.krige_scope
        self.methods = [prep.state.policy.methods.get(n, interp.ZERO_FILL) for n in prep.dyn_names]
        self.channel_cells = []
        for k in range(len(prep.dyn_idx)):
            cells = np.argwhere(prep.mask[:, k].any(axis=0))
            self.channel_cells.append(cells)
        self._cache = {}
        self._series = {}

    def _weights(self, k, obs, region):
        key = (k, obs.tobytes(), region)
        w = self._cache.get(key)
        if w is None:
            if len(self._cache) > 50000:
                self._cache.clear()
            r0, r1, c0, c1 = region
            rr, cc = np.meshgrid(np.arange(r0, r1), np.arange(c0, c1), indexing="ij")
            targets = np.stack([rr.ravel(), cc.ravel()], axis=1)
            spec = self.prep.spec
            vg = self.prep.state.variograms[self.prep.dyn_names[k]]
            w = interp.kriging_weights(spec.cell_centers_km(obs), spec.cell_centers_km(targets), vg)
            self._cache[key] = w
        return w

    def window(self, center, hours, exclude=None):
        """Filled patches around ``center`` for each hour in ``hours``: (len, D, P, P)."""
        if self.prep.config.cache_series:
            key = (tuple(center), None if exclude is None else tuple(exclude))
            series = self._series.get(key)
            if series is None:
                series = self._series[key] = self._fill(center, np.arange(self.prep.hours), exclude)
            return series[np.asarray(hours)]
        return self._fill(center, hours, exclude)

    def _fill(self, center, hours, exclude=None):
        prep = self.prep
        hours = np.asarray(hours)
        r, c = center
        h = self.half
        R, C = prep.spec.rows, prep.spec.cols
        r0, r1 = max(0, r - h), min(R, r + h + 1)
        c0, c1 = max(0, c - h), min(C, c + h + 1)
        region = (r0, r1, c0, c1)
        pr0, pc0 = r0 - (r - h), c0 - (c - h)
        nr, nc = r1 - r0, c1 - c0
        n = len(hours)
        out = np.zeros((n, len(prep.dyn_idx), self.patch, self.patch), np.float32)
        for k, cells in enumerate(self.channel_cells):
            if len(cells) == 0:
                continue
            if self.scope == "patch":
                inside = ((cells[:, 0] >= r0) & (cells[:, 0] < r1)
                          & (cells[:, 1] >= c0) & (cells[:, 1] < c1))
                obs = cells[inside]
            else:
                obs = cells
            if exclude is not None and len(obs):
                obs = obs[~((obs[:, 0] == exclude[0]) & (obs[:, 1] == exclude[1]))]
            plane = np.zeros((n, nr, nc), np.float64)
            if len(obs):
                m = prep.mask[hours, k][:, obs[:, 0], obs[:, 1]]
                v = prep.std_values[hours, k][:, obs[:, 0], obs[:, 1]].astype(np.float64)
                if self.methods[k] == interp.KRIGE:
                    patterns, inverse = np.unique(m, axis=0, return_inverse=True)
                    for p, pattern in enumerate(patterns):
                        rows = np.flatnonzero(inverse.reshape(-1) == p)
                        sel = obs[pattern]
                        if len(sel) == 0:
                            log.debug("no observations for channel %d near %s; zero fill", k, center)
                            continue
                        w = self._weights(k, sel, region)
                        plane[rows] = (v[rows][:, pattern] @ w.T).reshape(len(rows), nr, nc)
                # observed cells keep their own readings
                inside = ((obs[:, 0] >= r0) & (obs[:, 0] < r1)
                          & (obs[:, 1] >= c0) & (obs[:, 1] < c1))
                for j in np.flatnonzero(inside):
                    rr, cc = obs[j, 0] - r0, obs[j, 1] - c0
                    plane[:, rr, cc] = np.where(m[:, j], v[:, j], plane[:, rr, cc])
            out[:, k, pr0:pr0 + nr, pc0:pc0 + nc] = plane
        return out


def preprocess(source, config=None, state=None):
    return PreparedData(source, config or PrepConfig(), state)


def standardized_map(prep):
    """The standardized sparse map (dynamic channels plus calendar ids)."""
    src = prep.source
    out = src.copy()
    out.values[:, prep.dyn_idx] = prep.std_values
    out.mask[:, prep.dyn_idx] = prep.mask
    aux = src.schema.group_indices("auxiliary")
    for i in aux:
        name = src.schema.channels[i].name
        series = prep.dow if name == "day_of_week" else prep.hour
        out.values[:, i] = series[:, None, None].astype(np.float32)
        out.mask[:, i] = True
    return out
