"""One flat run configuration covering every pipeline stage.

Keys are ``section.field`` strings (``train.lr``, ``synth.rows`` ...). A JSON
file supplies any subset; ``--set key=value`` flags override the file; keys
not listed in :data:`DEFAULTS` are rejected. ``run.seed`` is the single seed
shared by the simulator, weight init and station sampling.
"""

from __future__ import annotations

import json
from dataclasses import fields

from .errors import ConfigError
from .model import ModelConfig
from .pipeline import PrepConfig
from .synthcity import SynthConfig
from .trainer import TrainConfig


def _section(prefix, cls, skip=()):
    return {f"{prefix}.{f.name}": f.default for f in fields(cls) if f.name not in skip}


DEFAULTS = {
    "grid.rows": 50,
    "grid.cols": 55,
    "grid.cell_km": 3.0,
    "grid.origin": [40.2, 116.0],
    **{k: (list(v) if isinstance(v, tuple) else v) for k, v in _section("synth", SynthConfig, skip=("seed",)).items()},
    "synth.missing_rate": 0.0,
    "synth.burst_len": 1,
    **{k: (list(v) if isinstance(v, tuple) else v)
       for k, v in _section("prep", PrepConfig, skip=("window", "patch")).items()},
    **_section("model", ModelConfig, skip=("seed",)),
    **_section("train", TrainConfig, skip=("window", "patch", "seed")),
    "eval.mape_floor": 1.0,
    "eval.segment": "test",
    "eval.aqi_table": None,
    "forecast.hour": None,
    "run.seed": 0,
    "run.deterministic": True,
}


def _coerce(key, value):
    default = DEFAULTS[key]
    if isinstance(value, str) and not isinstance(default, str):
        try:
            value = json.loads(value)
        except json.JSONDecodeError:
            raise ConfigError(f"cannot parse value {value!r} for {key}") from None
    if isinstance(default, bool) and not isinstance(value, bool):
        raise ConfigError(f"{key} expects true/false, got {value!r}")
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} expects an integer, got {value!r}")
    if isinstance(default, float) and not isinstance(value, (int, float)):
        raise ConfigError(f"{key} expects a number, got {value!r}")
    if isinstance(default, float):
        value = float(value)
    return value


class RunConfig:
    def __init__(self, values=None):
        self.values = dict(DEFAULTS)
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key, value):
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = _coerce(key, value)

    def __getitem__(self, key):
        return self.values[key]

    @classmethod
    def load(cls, path=None, overrides=()):
        values = {}
        if path is not None:
            with open(path) as fh:
                values = json.load(fh)
            if not isinstance(values, dict):
                raise ConfigError(f"config file {path} must hold a JSON object")
        cfg = cls(values)
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not of the form key=value")
            k, v = item.split("=", 1)
            cfg.set(k.strip(), v.strip())
        return cfg

    def to_json(self):
        return dict(sorted(self.values.items()))

    def write(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2)

    def _pick(self, prefix):
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.values.items() if k.startswith(prefix + ".")}

    @property
    def seed(self):
        return self.values["run.seed"]

    def synth(self):
        d = self._pick("synth")
        d.pop("missing_rate")
        d.pop("burst_len")
        d["seed"] = self.seed
        d["origin"] = tuple(d["origin"])
        return SynthConfig(**d)

    def prep(self):
        d = self._pick("prep")
        d["fractions"] = tuple(d["fractions"])
        return PrepConfig(window=self.values["model.window"], patch=self.values["model.patch"], **d)

    def model(self):
        d = self._pick("model")
        d["seed"] = self.seed
        return ModelConfig(**d)

    def train(self):
        return TrainConfig(window=self.values["model.window"], patch=self.values["model.patch"],
                           seed=self.seed, **self._pick("train"))

    def grid(self):
        from .gridstore import GridSpec
        g = self._pick("grid")
        return GridSpec(g["rows"], g["cols"], g["cell_km"], tuple(g["origin"]))
