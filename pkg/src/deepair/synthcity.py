"""Synthetic city generator with learnable spatio-temporal structure.

PM2.5 follows an explicit advection-diffusion scheme on the grid (one step
per hour, first-order upwind fluxes, 5-point Laplacian) driven by a
spatially uniform wind process and traffic-shaped emissions; the other
channels are derived from it, from the traffic pattern and from smooth
regional weather processes. Units of the dynamics are cells and hours.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import SynthConfigError
from .gridstore import GridSpec, UrbanDynamicsMap, canonical_schema, local_calendar, parse_timestamp


@dataclass
class SynthConfig:
    rows: int = 20
    cols: int = 20
    hours: int = 2160
    stations: int = 25
    seed: int = 0
    diffusion: float = 0.05
    wind_scale: float = 0.25
    emission: float = 1.5
    noise_sd: float = 0.5
    # scales the per-reading noise of every derived channel
    sensor_noise: float = 1.0
    decay: float = 0.04
    background: float = 60.0
    boundary: str = "open"
    cell_km: float = 3.0
    origin: tuple = (40.2, 116.0)
    start: str = "2017-01-01T00:00:00Z"
    utc_offset_hours: int = 8

    def check(self):
        bound = 4 * self.diffusion + self.wind_scale
        if self.diffusion < 0 or self.wind_scale < 0 or bound > 0.5:
            raise SynthConfigError(
                f"unstable configuration: 4*diffusion + wind_scale = {bound:.4g} exceeds the "
                f"explicit-scheme bound 0.5 (diffusion={self.diffusion}, wind_scale={self.wind_scale})")
        if self.sensor_noise < 0:
            raise SynthConfigError(f"sensor_noise must be >= 0, got {self.sensor_noise}")
        if self.boundary not in ("open", "closed"):
            raise SynthConfigError(f"boundary must be 'open' or 'closed', got {self.boundary!r}")
        if not 0 < self.stations <= self.rows * self.cols:
            raise SynthConfigError(f"cannot place {self.stations} stations on "
                                   f"{self.rows}x{self.cols} cells")

    def to_json(self):
        d = asdict(self)
        d["origin"] = list(self.origin)
        return d

    @classmethod
    def from_json(cls, d):
        d = dict(d)
        if "origin" in d:
            d["origin"] = tuple(d["origin"])
        return cls(**d)


def _ar1(rng, n, phi, size=None):
    shape = (n,) if size is None else (n,) + tuple(size)
    eps = rng.standard_normal(shape)
    out = np.empty(shape)
    out[0] = eps[0]
    s = np.sqrt(1 - phi * phi)
    for t in range(1, n):
        out[t] = phi * out[t - 1] + s * eps[t]
    return out


def _smooth(field, passes=2):
    f = field.astype(np.float64)
    for _ in range(passes):
        p = np.pad(f, 1, mode="edge")
        f = (p[1:-1, 1:-1] * 4 + p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:]) / 8.0
    return f


def _roads(rng, rows, cols, n=6):
    grid = np.zeros((rows, cols))
    for _ in range(n):
        kind = rng.integers(3)
        if kind == 0:
            grid[rng.integers(rows), :] = 1.0
        elif kind == 1:
            grid[:, rng.integers(cols)] = 1.0
        else:
            r0 = rng.integers(rows)
            for c in range(cols):
                grid[(r0 + c) % rows, c] = 1.0
    return np.maximum(grid, 0.35 * _smooth(grid, 1))


def step_field(conc, diffusion, u, w, source, decay, background, boundary):
    """Advance the concentration field by one explicit step.

    ``u`` is the eastward (column) and ``w`` the southward (row) velocity in
    cells per step. Closed boundaries carry zero diffusive and advective flux;
    open boundaries see ghost cells at ``background``.
    """
    if boundary == "closed":
        p = np.pad(conc, 1, mode="edge")
    else:
        p = np.pad(conc, 1, mode="constant", constant_values=background)
    lap = p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:] - 4 * conc
    # fluxes through the column faces (cols + 1) and row faces (rows + 1)
    left, right = p[1:-1, :-1], p[1:-1, 1:]
    fx = np.where(u > 0, u * left, u * right)
    up, down = p[:-1, 1:-1], p[1:, 1:-1]
    fy = np.where(w > 0, w * up, w * down)
    if boundary == "closed":
        fx[:, [0, -1]] = 0.0
        fy[[0, -1], :] = 0.0
    div = (fx[:, 1:] - fx[:, :-1]) + (fy[1:, :] - fy[:-1, :])
    return conc + diffusion * lap - div + source - decay * (conc - background)


def simulate(config, initial=None, return_field=False):
    """Generate ``(truth, observed)`` maps for a synthetic city."""
    config.check()
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    T, R, C = cfg.hours, cfg.rows, cfg.cols
    spec = GridSpec(R, C, cfg.cell_km, tuple(cfg.origin))
    schema = canonical_schema()
    start = parse_timestamp(cfg.start)
    dow, hour = local_calendar(start, T, cfg.utc_offset_hours)

    raw_u = _ar1(rng, T, 0.97)
    raw_w = _ar1(rng, T, 0.97)
    u = 0.5 * cfg.wind_scale * raw_u
    w = 0.5 * cfg.wind_scale * raw_w
    speed = np.hypot(u, w)
    over = speed > cfg.wind_scale
    u[over] *= cfg.wind_scale / speed[over]
    w[over] *= cfg.wind_scale / speed[over]
    speed = np.hypot(u, w)
    background = cfg.background * np.exp(0.45 * _ar1(rng, T, 0.98))

    roads = _roads(rng, R, C)
    weekday = np.where(dow >= 5, 0.8, 1.0)
    diurnal = (0.35 + 0.65 * (np.exp(-((hour - 8) / 2.0) ** 2)
                              + np.exp(-((hour - 18) / 2.5) ** 2))) * weekday
    emis_map = cfg.emission * (0.2 + _smooth(roads, 2))

    if initial is None:
        initial = background[0] * (1.0 + 0.3 * _smooth(rng.standard_normal((R, C)), 3))
    conc = np.array(initial, dtype=np.float64)
    pm = np.empty((T, R, C))
    for t in range(T):
        pm[t] = conc
        src = emis_map * diurnal[t]
        conc = step_field(conc, cfg.diffusion, u[t], w[t], src, cfg.decay, background[t],
                          cfg.boundary)
        if cfg.noise_sd > 0:
            conc = conc + cfg.noise_sd * rng.standard_normal((R, C))
            conc = np.maximum(conc, 1.0)

    tf = roads[None] * diurnal[:, None, None]
    def noise(sd):
        return cfg.sensor_noise * sd * rng.standard_normal((T, R, C))

    pm10 = 1.4 * pm + 15 + noise(3.0)
    no2 = np.maximum(15 + 0.3 * pm + 40 * tf + noise(3.0), 2.0)
    co = np.maximum(1.0 + 0.012 * pm + 0.5 * tf + noise(0.03), 0.1)
    sun = np.maximum(0.0, np.sin(2 * np.pi * (hour - 8) / 24))[:, None, None]
    o3 = np.maximum(35 + 55 * sun - 0.25 * (no2 - 40) + noise(4.0), 5.0)

    rows_idx = np.arange(R)[None, :, None]
    pressure = 1013 + 6 * _ar1(rng, T, 0.95)[:, None, None] + 0.05 * (rows_idx - R / 2) + noise(0.2)
    # no seasonal trend: a drifting level would put later segments outside the training range
    temperature = (4 + 5 * np.sin(2 * np.pi * (hour - 9) / 24)[:, None, None]
                   + 2 * _ar1(rng, T, 0.95)[:, None, None] + 1.5 * _smooth(roads, 2)[None]
                   + noise(0.3))
    # meteorological convention: direction the wind blows from, clockwise from north
    wdir = (np.degrees(np.arctan2(-u, w)) % 360.0)[:, None, None] + noise(5.0)
    wdir = np.mod(wdir, 360.0)
    wspd = np.maximum(12.0 * speed[:, None, None] + noise(0.3), 0.0)
    rain = np.maximum(_ar1(rng, T, 0.9) - 1.2, 0.0)[:, None, None] * 3.0
    precip = rain * np.exp(rng.standard_normal((T, R, C)))
    humidity = np.clip(55 + 10 * _ar1(rng, T, 0.95)[:, None, None] + 8 * (rain > 0) + noise(12.0),
                       5.0, 100.0)
    count = np.maximum(50 + 1500 * tf * (1 + 0.1 * rng.standard_normal((T, R, C))), 0.0)
    tspeed = np.clip(60 - 35 * tf + noise(3.0), 5.0, None)
    status = np.where(tspeed > 40, 0.0, np.where(tspeed > 25, 1.0, 2.0))

    channels = {
        "PM2.5": pm, "PM10": pm10, "NO2": no2, "CO": co, "O3": o3,
        "pressure": pressure, "temperature": temperature, "wind_direction": wdir,
        "precipitation": precip, "wind_speed": wspd, "humidity": humidity,
        "traffic_status": status, "traffic_speed": tspeed, "traffic_count": count,
        "day_of_week": np.broadcast_to(dow[:, None, None], (T, R, C)),
        "hour_of_day": np.broadcast_to(hour[:, None, None], (T, R, C)),
    }
    values = np.stack([np.broadcast_to(channels[n], (T, R, C)) for n in schema.names],
                      axis=1).astype(np.float32)
    truth = UrbanDynamicsMap(spec, schema, start, values, np.ones(values.shape, bool))

    cells = rng.choice(R * C, size=cfg.stations, replace=False)
    obs_mask = np.zeros(values.shape, bool)
    dyn = schema.dynamic_indices
    for k in cells:
        r, c = divmod(int(k), C)
        obs_mask[:, dyn, r, c] = True
    observed = UrbanDynamicsMap(spec, schema, start, np.where(obs_mask, values, 0).astype(np.float32),
                                obs_mask)
    if return_field:
        return truth, observed, pm
    return truth, observed


def plant_missingness(observed, rate, burst_len=1, seed=0):
    """Remove observations in seeded bursts.

    Every hour starts a burst of ``burst_len`` hours with probability q, where
    q is chosen so that each hour is missing with probability ``rate``. With
    ``burst_len=1`` the planted entries are independent Bernoulli(rate).
    """
    if not 0 <= rate < 1:
        raise SynthConfigError(f"missingness rate must be in [0, 1), got {rate}")
    out = observed.copy()
    if rate == 0:
        return out
    rng = np.random.default_rng(seed)
    T = observed.hours
    L = max(int(burst_len), 1)
    q = 1.0 - (1.0 - rate) ** (1.0 / L)
    series = np.argwhere(observed.mask.any(axis=0))
    for ci, r, c in series:
        starts = rng.random(T + L - 1) < q
        # hour t is missing if a burst started in [t - L + 1, t]
        cover = np.convolve(starts.astype(np.int64), np.ones(L, np.int64))[L - 1:L - 1 + T] > 0
        hit = cover & observed.mask[:, ci, r, c]
        out.mask[hit, ci, r, c] = False
        out.values[hit, ci, r, c] = 0.0
    return out
