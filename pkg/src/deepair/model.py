"""Deep-AIR network (AirRes + two-layer LSTM) and the comparison baselines.

Inputs are windows of standardized patches: ``dyn`` holds the 14 urban
dynamics channels with shape (B, W, D, P, P); ``dow`` and ``hour`` hold the
local calendar ids of every step. The two calendar features are embedded to
one scalar each and broadcast into two constant planes, giving the 16-channel
patch seen by the convolutional stack.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensorcore as tc
from .errors import ModelError
from .tensorcore import ParameterSet, Tensor

KINDS = ("deepair", "resnet_lstm", "lstm_only", "persistence")


@dataclass
class AirResConfig:
    units: int = 4
    channels: int = 32
    patch: int = 15
    one_by_one: bool = True

    def __post_init__(self):
        if self.units < 1:
            raise ModelError(f"AirRes needs at least one residual unit, got {self.units}")
        if self.patch % 2 != 1:
            raise ModelError(f"patch edge must be odd, got {self.patch}")


@dataclass
class LstmHeadConfig:
    layers: int = 2
    hidden: int = 128
    window: int = 48
    outputs: int = 5

    def __post_init__(self):
        if self.window < 1 or self.layers < 1:
            raise ModelError("LSTM head needs window >= 1 and layers >= 1")


@dataclass
class ModelConfig:
    kind: str = "deepair"
    units: int = 4
    channels: int = 32
    patch: int = 15
    one_by_one: bool = True
    layers: int = 2
    hidden: int = 128
    window: int = 48
    seed: int = 0
    dynamic_channels: int = 14
    outputs: int = 5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ModelError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        self.airres
        self.head

    @property
    def airres(self):
        return AirResConfig(self.units, self.channels, self.patch, self.one_by_one)

    @property
    def head(self):
        return LstmHeadConfig(self.layers, self.hidden, self.window, self.outputs)

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, d):
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ModelError(f"unknown model config keys {sorted(extra)}")
        return cls(**d)

    def write(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2)


INIT_SCHEME = {
    "conv": "kaiming_uniform(bound=sqrt(6/fan_in)), bias 0",
    "dense": "kaiming_uniform(bound=sqrt(6/fan_in)), bias 0",
    "lstm": "uniform(+-1/sqrt(hidden)), bias 0 except forget gate +1",
    "batchnorm": "scale 1, shift 0, running mean 0, running var 1",
    "embedding": "uniform(+-0.05)",
}


def _kaiming(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def _add_conv(ps, rng, name, c_in, c_out, k):
    ps.add(name + ".w", _kaiming(rng, (c_out, c_in, k, k), c_in * k * k))
    ps.add(name + ".b", np.zeros(c_out, np.float32))


def _add_bn(ps, name, c):
    ps.add(name + ".scale", np.ones(c, np.float32))
    ps.add(name + ".shift", np.zeros(c, np.float32))
    ps.add_bn(name, c)


def _add_lstm(ps, rng, name, d_in, d_h):
    bound = 1.0 / np.sqrt(d_h)
    ps.add(name + ".wx", rng.uniform(-bound, bound, (d_in, 4 * d_h)).astype(np.float32))
    ps.add(name + ".wh", rng.uniform(-bound, bound, (d_h, 4 * d_h)).astype(np.float32))
    b = np.zeros(4 * d_h, np.float32)
    b[d_h:2 * d_h] = 1.0
    ps.add(name + ".b", b)


def _add_embeddings(ps, rng):
    ps.add("emb.dow", rng.uniform(-0.05, 0.05, (7, 1)).astype(np.float32))
    ps.add("emb.hour", rng.uniform(-0.05, 0.05, (24, 1)).astype(np.float32))


def _add_head(ps, rng, cfg, d_in):
    for layer in range(cfg.layers):
        _add_lstm(ps, rng, f"lstm{layer}", d_in if layer == 0 else cfg.hidden, cfg.hidden)
    ps.add("head.w", _kaiming(rng, (cfg.hidden, cfg.outputs), cfg.hidden))
    ps.add("head.b", np.zeros(cfg.outputs, np.float32))


def _conv(x, params, name):
    return tc.conv2d(x, params[name + ".w"], params[name + ".b"])


def _bn(x, params, name, mode):
    return tc.batchnorm(x, params[name + ".scale"], params[name + ".shift"], params.bn[name], mode)


def residual_unit(x, params, prefix, mode="train"):
    """``relu(x + F(x))`` with F = conv3x3, BN, ReLU, conv3x3, BN."""
    c = params[prefix + ".conv1.w"].shape[1]
    if x.shape[1] != c:
        raise ModelError(f"residual unit {prefix} expects {c} channels, got {x.shape[1]}")
    f = _conv(x, params, prefix + ".conv1")
    f = tc.relu(_bn(f, params, prefix + ".bn1", mode))
    f = _conv(f, params, prefix + ".conv2")
    f = _bn(f, params, prefix + ".bn2", mode)
    return tc.relu(tc.add(x, f))


def airres_features(x, config, params, mode="train"):
    """Feature maps of the convolutional stack, (N, channels, P, P)."""
    # plain linear lift to the working width; levels pass on through the identity paths
    h = _conv(x, params, "stem.conv")
    for u in range(config.units):
        h = residual_unit(h, params, f"unit{u}", mode)
        # 1x1 mixing layers sit between consecutive residual units
        if config.one_by_one and u < config.units - 1:
            h = _conv(h, params, f"mix{u}")
    return h


def reduce_features(h):
    """Center-cell channel column concatenated with the spatial mean, (N, 2C)."""
    p = h.shape[-1] // 2
    center = tc.index(h, (slice(None), slice(None), p, p))
    return tc.concat([center, tc.mean(h, axis=(2, 3))], axis=1)


def airres_forward(patch, config, params, mode="train", mask=None):
    """Feature vector(s) of one patch (16, P, P) or a batch (N, 16, P, P).

    ``mask``, when given, must be fully set: spatial filling has to happen
    before the network sees a patch.
    """
    if mask is not None and not np.all(mask):
        raise ModelError("patch has unset cells; run the spatial fill first")
    x = tc.as_tensor(patch)
    single = x.ndim == 3
    if single:
        x = tc.reshape(x, (1,) + x.shape)
    out = reduce_features(airres_features(x, config, params, mode))
    return tc.reshape(out, (out.shape[1],)) if single else out


def embed_auxiliary(dow, hour, params, patch=None):
    """Embedded calendar scalars: (N, 2), or (N, 2, P, P) planes when ``patch`` is set."""
    dow = np.atleast_1d(np.asarray(dow, dtype=np.int64))
    hour = np.atleast_1d(np.asarray(hour, dtype=np.int64))
    e = tc.concat([tc.embedding(dow, params["emb.dow"]),
                   tc.embedding(hour, params["emb.hour"])], axis=1)
    if patch is None:
        return e
    n = e.shape[0]
    return tc.broadcast_to(tc.reshape(e, (n, 2, 1, 1)), (n, 2, patch, patch))


def lstm_head(seq, params, layers):
    """Stacked LSTM over (B, W, F) followed by the dense output layer."""
    b, w, _ = seq.shape
    states = []
    for layer in range(layers):
        hidden = params[f"lstm{layer}.wh"].shape[0]
        zeros = np.zeros((b, hidden), seq.dtype)
        states.append([Tensor(zeros), Tensor(zeros)])
    for t in range(w):
        x = tc.index(seq, (slice(None), t))
        for layer in range(layers):
            h, c = states[layer]
            h, c = tc.lstm_cell(x, h, c, params[f"lstm{layer}.wx"], params[f"lstm{layer}.wh"],
                                params[f"lstm{layer}.b"])
            states[layer] = [h, c]
            x = h
    return tc.linear(states[-1][0], params["head.w"], params["head.b"])


@dataclass
class WindowBatch:
    """B windows of W consecutive standardized patches."""

    dyn: np.ndarray
    dow: np.ndarray
    hour: np.ndarray
    hours: np.ndarray
    centers: list = field(default_factory=list)

    def __post_init__(self):
        if self.dyn.ndim == 4:
            self.dyn = self.dyn[None]
            self.dow = np.atleast_2d(self.dow)
            self.hour = np.atleast_2d(self.hour)
            self.hours = np.atleast_2d(self.hours)

    @property
    def size(self):
        return self.dyn.shape[0]

    @property
    def window(self):
        return self.dyn.shape[1]

    def check_consecutive(self):
        if self.window > 1 and not np.all(np.diff(self.hours, axis=1) == 1):
            raise ModelError("window patches are not consecutive hours")


class Forecaster:
    """Common interface: per-patch ``encode`` followed by a sequence ``temporal`` head."""

    kind = "base"

    def __init__(self, config, dtype=np.float32):
        self.config = config
        self.params = ParameterSet()

    def encode(self, dyn, dow, hour, mode="train"):
        raise NotImplementedError

    def temporal(self, seq):
        raise NotImplementedError

    def forward(self, batch, mode="train"):
        batch.check_consecutive()
        b, w = batch.dyn.shape[:2]
        feats = self.encode(batch.dyn.reshape((b * w,) + batch.dyn.shape[2:]),
                            batch.dow.reshape(-1), batch.hour.reshape(-1), mode)
        return self.temporal(tc.reshape(feats, (b, w, feats.shape[-1])))

    @property
    def trainable(self):
        return len(self.params) > 0

    def astype(self, dtype):
        self.params.astype(dtype)
        return self


class DeepAir(Forecaster):
    kind = "deepair"

    def __init__(self, config):
        super().__init__(config)
        if config.kind == "resnet_lstm":
            self.kind = "resnet_lstm"
        rng = np.random.default_rng(config.seed)
        ar = config.airres
        ps = self.params
        _add_embeddings(ps, rng)
        _add_conv(ps, rng, "stem.conv", config.dynamic_channels + 2, ar.channels, 3)
        for u in range(ar.units):
            for k in (1, 2):
                _add_conv(ps, rng, f"unit{u}.conv{k}", ar.channels, ar.channels, 3)
                _add_bn(ps, f"unit{u}.bn{k}", ar.channels)
            if ar.one_by_one and u < ar.units - 1:
                _add_conv(ps, rng, f"mix{u}", ar.channels, ar.channels, 1)
        _add_head(ps, rng, config.head, 2 * ar.channels)

    def encode(self, dyn, dow, hour, mode="train"):
        p = self.config.patch
        aux = embed_auxiliary(dow, hour, self.params, p)
        x = tc.concat([Tensor(np.asarray(dyn, dtype=self.params.dtype)), aux], axis=1)
        return reduce_features(airres_features(x, self.config.airres, self.params, mode))

    def temporal(self, seq):
        return lstm_head(seq, self.params, self.config.layers)


class LstmOnly(Forecaster):
    """LSTM head over the center cell's 16 channel values per step."""

    kind = "lstm_only"

    def __init__(self, config):
        super().__init__(config)
        rng = np.random.default_rng(config.seed)
        _add_embeddings(self.params, rng)
        _add_head(self.params, rng, config.head, config.dynamic_channels + 2)

    def encode(self, dyn, dow, hour, mode="train"):
        c = self.config.patch // 2
        center = Tensor(np.ascontiguousarray(np.asarray(dyn)[:, :, c, c], dtype=self.params.dtype))
        return tc.concat([center, embed_auxiliary(dow, hour, self.params)], axis=1)

    def temporal(self, seq):
        return lstm_head(seq, self.params, self.config.layers)


class Persistence(Forecaster):
    """Next hour equals the (filled) center-cell pollutant values of the last step."""

    kind = "persistence"

    def encode(self, dyn, dow, hour, mode="train"):
        c = self.config.patch // 2
        return Tensor(np.ascontiguousarray(np.asarray(dyn)[:, :self.config.outputs, c, c]))

    def temporal(self, seq):
        return tc.index(seq, (slice(None), seq.shape[1] - 1))


def build_model(config):
    if config.kind == "deepair":
        return DeepAir(config)
    if config.kind == "resnet_lstm":
        return DeepAir(ModelConfig(**{**config.to_json(), "one_by_one": False}))
    if config.kind == "lstm_only":
        return LstmOnly(config)
    if config.kind == "persistence":
        return Persistence(config)
    raise ModelError(f"unknown model kind {config.kind!r}")


def make_baseline(kind, config=None):
    """Comparison model of ``kind`` in {persistence, lstm_only, resnet_lstm}."""
    if kind not in ("persistence", "lstm_only", "resnet_lstm"):
        raise ModelError(f"unknown baseline {kind!r}")
    base = (config or ModelConfig()).to_json()
    base["kind"] = kind
    if kind == "resnet_lstm":
        base["one_by_one"] = False
    return build_model(ModelConfig(**base))


def deepair_forward(batch, model, mode="eval"):
    """Standardized 5-pollutant forecast(s) for a :class:`WindowBatch`."""
    return model.forward(batch, mode)


def model_meta(model):
    return {"model": model.config.to_json(), "init": INIT_SCHEME}


def load_model(state, meta):
    model = build_model(ModelConfig.from_json(meta["model"]))
    if model.trainable:
        model.params.load_state(state)
    return model
