"""Two-step gap filling: temporal linear interpolation, then spatial.

Channels whose stations correlate strongly (mean pairwise Pearson r above a
threshold) are filled by ordinary Kriging; the rest are zero-filled on the
standardized scale.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares

from .errors import InsufficientDataError, PolicyError

log = logging.getLogger(__name__)

KRIGE = "krige"
ZERO_FILL = "zero_fill"


def interpolate_temporal(values, mask=None, max_gap=6):
    """Fill short gaps in an hourly series.

    Interior gaps of at most ``max_gap`` hours are filled linearly between the
    bracketing valid values; leading and trailing runs of at most ``max_gap``
    take the nearest valid value. Longer gaps stay missing.

    Parameters
    ----------
    values : array_like
        Hourly series. NaN marks a missing entry when ``mask`` is omitted.
    mask : array_like of bool, optional
        True where ``values`` is valid.
    max_gap : int

    Returns
    -------
    filled, mask : ndarray, ndarray
    """
    v = np.array(values, dtype=np.float64)
    m = np.isfinite(v) if mask is None else np.array(mask, dtype=bool) & np.isfinite(v)
    out_v = v.copy()
    out_m = m.copy()
    n = len(v)
    valid = np.flatnonzero(m)
    if len(valid) == 0:
        return out_v, out_m
    # leading / trailing runs
    lead = valid[0]
    if 0 < lead <= max_gap:
        out_v[:lead] = v[lead]
        out_m[:lead] = True
    trail = n - 1 - valid[-1]
    if 0 < trail <= max_gap:
        out_v[valid[-1] + 1:] = v[valid[-1]]
        out_m[valid[-1] + 1:] = True
    for a, b in zip(valid[:-1], valid[1:]):
        gap = b - a - 1
        if 0 < gap <= max_gap:
            frac = np.arange(1, gap + 1) / (gap + 1)
            out_v[a + 1:b] = v[a] + (v[b] - v[a]) * frac
            out_m[a + 1:b] = True
    return out_v, out_m


def interpolate_map_temporal(m, max_gap=6, channels=None):
    """Apply :func:`interpolate_temporal` to every observed (channel, cell) series."""
    out = m.copy()
    chans = m.schema.dynamic_indices if channels is None else channels
    for ci in chans:
        for (r, c) in m.station_cells(ci):
            v, k = interpolate_temporal(m.values[:, ci, r, c], m.mask[:, ci, r, c], max_gap)
            fill = k & ~m.mask[:, ci, r, c]
            out.values[fill, ci, r, c] = v[fill].astype(np.float32)
            out.mask[:, ci, r, c] = k
    return out


def pearson(x, y):
    """Pearson correlation over jointly valid (non-NaN) entries.

    Returns None when fewer than two joint samples exist or either series has
    zero variance over them.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"series lengths differ: {x.shape} vs {y.shape}")
    ok = np.isfinite(x) & np.isfinite(y)
    if ok.sum() < 2:
        return None
    dx = x[ok] - x[ok].mean()
    dy = y[ok] - y[ok].mean()
    sxx = float(np.dot(dx, dx))
    syy = float(np.dot(dy, dy))
    if sxx <= 0.0 or syy <= 0.0:
        return None
    r = float(np.dot(dx, dy)) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))


@dataclass
class CorrelationReport:
    """Per-channel mean pairwise station correlation; ``r`` is None when undefined."""

    r: dict
    pairs: dict

    def to_json(self, policy=None):
        out = {}
        for name in self.r:
            entry = {"r": self.r[name], "pairs": self.pairs.get(name, 0)}
            if policy is not None:
                entry["policy"] = policy.methods.get(name)
            out[name] = entry
        return out

    def write(self, path, policy=None):
        with open(path, "w") as fh:
            json.dump(self.to_json(policy), fh, indent=2)

    @classmethod
    def from_values(cls, values):
        return cls(dict(values), {k: 0 for k in values})


def correlation_report(m, t0=0, t1=None, channels=None):
    """Mean pairwise Pearson r across station series of each channel over [t0, t1)."""
    t1 = m.hours if t1 is None else t1
    chans = m.schema.dynamic_indices if channels is None else channels
    rs, pairs = {}, {}
    for ci in chans:
        name = m.schema.channels[ci].name
        cells = m.station_cells(ci)
        series = []
        for (r, c) in cells:
            s = m.values[t0:t1, ci, r, c].astype(np.float64)
            s = np.where(m.mask[t0:t1, ci, r, c], s, np.nan)
            series.append(s)
        coeffs = []
        for a, b in itertools.combinations(range(len(series)), 2):
            v = pearson(series[a], series[b])
            if v is not None:
                coeffs.append(v)
        rs[name] = math.fsum(coeffs) / len(coeffs) if coeffs else None
        pairs[name] = len(coeffs)
    return CorrelationReport(rs, pairs)


@dataclass
class FillPolicy:
    methods: dict
    threshold: float = 0.6

    def krige_channels(self):
        return [k for k, v in self.methods.items() if v == KRIGE]

    def method(self, name):
        return self.methods[name]

    def to_json(self):
        return {"threshold": self.threshold, "methods": dict(self.methods)}

    @classmethod
    def from_json(cls, d):
        return cls(dict(d["methods"]), float(d["threshold"]))


def build_fill_policy(report, threshold=0.6, schema=None):
    """Krige channels with defined r strictly above ``threshold``; zero-fill the rest."""
    if schema is not None:
        needed = [schema.channels[i].name for i in schema.dynamic_indices]
        absent = [n for n in needed if n not in report.r]
        if absent:
            raise PolicyError(f"correlation report lacks channels {absent}")
    methods = {}
    for name, r in report.r.items():
        methods[name] = KRIGE if (r is not None and r > threshold) else ZERO_FILL
    return FillPolicy(methods, threshold)


SILL_FLOOR = 1e-6


@dataclass(frozen=True)
class Variogram:
    nugget: float
    sill: float
    range_km: float
    model: str = "exponential"

    def __post_init__(self):
        if self.model != "exponential":
            raise ValueError(f"unsupported variogram model {self.model!r}")
        if not (self.nugget >= 0 and self.sill > 0 and self.nugget <= self.sill
                and self.range_km > 0):
            raise ValueError(f"invalid variogram parameters {self}")

    def __call__(self, h):
        h = np.asarray(h, dtype=np.float64)
        g = self.nugget + (self.sill - self.nugget) * (1.0 - np.exp(-3.0 * h / self.range_km))
        # gamma(0) = 0 keeps the interpolator exact at data locations
        return np.where(h > 0, g, 0.0)

    def to_json(self):
        return {"model": self.model, "nugget": self.nugget, "sill": self.sill,
                "range_km": self.range_km}

    @classmethod
    def from_json(cls, d):
        return cls(float(d["nugget"]), float(d["sill"]), float(d["range_km"]),
                   d.get("model", "exponential"))


def _pairwise(a, b):
    d = a[:, None, :] - b[None, :, :]
    return np.sqrt((d ** 2).sum(-1))


def empirical_variogram(points, values, bins=12, max_dist=None):
    """Binned semivariance, mean of 0.5*(z_i - z_j)^2 per distance bin.

    ``values`` may be (n,) or (k, n); in the latter case the k realisations
    (e.g. hours) are pooled and NaN entries are skipped pairwise.

    Returns
    -------
    centers, gamma, counts : ndarray
        Only non-empty bins are returned.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    z = np.asarray(values, dtype=np.float64)
    if z.ndim == 1:
        z = z[None, :]
    n = pts.shape[0]
    iu, ju = np.triu_indices(n, k=1)
    dist = np.sqrt(((pts[iu] - pts[ju]) ** 2).sum(-1))
    diff = z[:, iu] - z[:, ju]
    ok = np.isfinite(diff)
    sq = np.where(ok, 0.5 * diff ** 2, 0.0).sum(0)
    cnt = ok.sum(0)
    if max_dist is None:
        max_dist = dist.max() if len(dist) else 0.0
    edges = np.linspace(0.0, max_dist, bins + 1)
    idx = np.clip(np.searchsorted(edges, dist, side="right") - 1, 0, bins - 1)
    keep = dist <= max_dist
    sums = np.bincount(idx[keep], weights=sq[keep], minlength=bins)
    counts = np.bincount(idx[keep], weights=cnt[keep], minlength=bins)
    centers = 0.5 * (edges[:-1] + edges[1:])
    nz = counts > 0
    return centers[nz], sums[nz] / counts[nz], counts[nz]


def fit_variogram(points, values, bins=12, max_dist=None):
    """Least-squares fit of an exponential variogram to the binned semivariance."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    distinct = len({tuple(p) for p in pts.tolist()})
    if pts.shape[0] < 4 or distinct < 4:
        raise InsufficientDataError(f"variogram fit needs >= 4 distinct locations, got {distinct}")
    h, g, _ = empirical_variogram(pts, values, bins, max_dist)
    if len(h) == 0:
        raise InsufficientDataError("no station pairs to build a variogram from")
    hmax = float(h.max()) if h.max() > 0 else 1.0
    gmax = float(g.max())
    scale = max(gmax, SILL_FLOOR)

    def resid(p):
        nug, psill, rng = p
        model = nug + psill * (1.0 - np.exp(-3.0 * h / rng))
        return (model - g) / scale

    lo = np.array([0.0, SILL_FLOOR, 1e-3 * hmax])
    hi = np.array([max(gmax, SILL_FLOOR) * 2 + SILL_FLOOR, max(gmax, SILL_FLOOR) * 4 + SILL_FLOOR,
                   20.0 * hmax])
    x0 = np.clip([float(g.min()) * 0.5, max(gmax - float(g.min()) * 0.5, SILL_FLOOR),
                  0.5 * hmax], lo, hi)
    sol = least_squares(resid, x0, bounds=(lo, hi), method="trf")
    nug, psill, rng = (float(v) for v in np.clip(sol.x, lo, hi))
    return Variogram(nug, nug + max(psill, SILL_FLOOR), max(rng, 1e-3 * hmax))


def _dedupe(points, values):
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    z = np.asarray(values, dtype=np.float64)
    keys = [tuple(p) for p in pts.tolist()]
    if len(set(keys)) == len(keys):
        return pts, z
    order = {}
    for i, k in enumerate(keys):
        order.setdefault(k, []).append(i)
    upts = np.array(list(order.keys()))
    uz = np.stack([z[idx].mean(axis=0) for idx in order.values()])
    return upts, uz


def idw_weights(points, targets, power=2.0):
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    tgt = np.asarray(targets, dtype=np.float64).reshape(-1, 2)
    d = _pairwise(tgt, pts)
    w = np.empty_like(d)
    exact = d == 0
    with np.errstate(divide="ignore"):
        w[:] = 1.0 / d ** power
    hit = exact.any(axis=1)
    w[hit] = exact[hit].astype(np.float64)
    return w / w.sum(axis=1, keepdims=True)


def kriging_weights(points, targets, vg):
    """Ordinary-Kriging weights, shape (n_targets, n_points); rows sum to one.

    Points must be distinct. Falls back to inverse-distance weights (power 2)
    when the system is singular.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    tgt = np.asarray(targets, dtype=np.float64).reshape(-1, 2)
    n = pts.shape[0]
    if n == 0:
        raise InsufficientDataError("kriging needs at least one observation")
    if n == 1:
        return np.ones((tgt.shape[0], 1))
    a = np.ones((n + 1, n + 1))
    a[:n, :n] = vg(_pairwise(pts, pts))
    a[n, n] = 0.0
    rhs = np.ones((n + 1, tgt.shape[0]))
    rhs[:n] = vg(_pairwise(pts, tgt))
    try:
        if np.linalg.cond(a) > 1e14:
            raise np.linalg.LinAlgError("ill-conditioned kriging system")
        sol = np.linalg.solve(a, rhs)
    except np.linalg.LinAlgError:
        log.warning("singular kriging system with %d points; using inverse-distance weights", n)
        return idw_weights(pts, tgt)
    return sol[:n].T


def krige(points, values, targets, vg):
    """Ordinary-Kriging predictions at ``targets``.

    Duplicate locations are averaged before solving. ``values`` may carry a
    trailing axis of several realisations.
    """
    pts, z = _dedupe(points, values)
    w = kriging_weights(pts, targets, vg)
    return w @ z


def cell_grid(spec):
    rr, cc = np.meshgrid(np.arange(spec.rows), np.arange(spec.cols), indexing="ij")
    return np.stack([rr.ravel(), cc.ravel()], axis=1)


def fill_map(sparse, policy, variograms, exclude=None):
    """Densify a (standardized) sparse map hour by hour.

    Krige channels are interpolated from every observed cell of that hour;
    zero-fill channels get 0 where unobserved. ``exclude`` names a cell whose
    own readings are ignored and which is filled from the remaining cells.
    Auxiliary channels are passed through.
    """
    spec, schema = sparse.spec, sparse.schema
    out = sparse.copy()
    all_cells = cell_grid(spec)
    targets_km = spec.cell_centers_km(all_cells)
    cache = {}
    for ci in schema.dynamic_indices:
        name = schema.channels[ci].name
        method = policy.methods.get(name, ZERO_FILL)
        for t in range(sparse.hours):
            m = sparse.mask[t, ci].copy()
            if exclude is not None:
                m[exclude] = False
            obs = np.argwhere(m)
            plane = np.zeros((spec.rows, spec.cols), np.float64)
            if method == KRIGE:
                if len(obs) == 0:
                    log.info("channel %s hour %d has no observed cells; zero-filled", name, t)
                else:
                    key = (ci, obs.tobytes())
                    w = cache.get(key)
                    if w is None:
                        w = kriging_weights(spec.cell_centers_km(obs), targets_km, variograms[name])
                        cache[key] = w
                    z = sparse.values[t, ci][m].astype(np.float64)
                    plane = (w @ z).reshape(spec.rows, spec.cols)
            plane[m] = sparse.values[t, ci][m]
            out.values[t, ci] = plane.astype(np.float32)
            out.mask[t, ci] = True
    return out
