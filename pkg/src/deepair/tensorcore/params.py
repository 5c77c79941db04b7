"""Parameter containers, SGD and the checkpoint file format.

Checkpoint layout (all integers little-endian)::

    8 bytes   magic b"DAIRCKPT"
    4 bytes   uint32 format version
    8 bytes   uint64 header length H
    H bytes   UTF-8 JSON header: {"entries": [{name, shape, kind}], "meta": {...}}
    payload   float32 values of every entry, in header order, C order
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from ..errors import CheckpointError
from .ops import BatchNormState
from .tensor import Tensor

MAGIC = b"DAIRCKPT"
CKPT_VERSION = 1


class ParameterSet:
    """Named trainable tensors plus non-trainable batch-norm statistics."""

    def __init__(self):
        self.params = OrderedDict()
        self.bn = OrderedDict()

    def add(self, name, data):
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.asarray(data), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def add_bn(self, name, channels, dtype=np.float32):
        self.bn[name] = BatchNormState(channels, dtype)
        return self.bn[name]

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params.values())

    def __len__(self):
        return len(self.params)

    def names(self):
        return list(self.params)

    def count(self):
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    @property
    def dtype(self):
        for p in self.params.values():
            return p.dtype
        return np.dtype(np.float32)

    def state(self):
        """Flat name -> array mapping of everything a checkpoint stores."""
        out = OrderedDict()
        for name, p in self.params.items():
            out[name] = p.data
        for name, s in self.bn.items():
            out[name + ".running_mean"] = s.mean
            out[name + ".running_var"] = s.var
        return out

    def load_state(self, state):
        for name, p in self.params.items():
            src = np.asarray(state[name])
            if src.shape != p.shape:
                raise CheckpointError(f"parameter {name}: shape {src.shape} != {p.shape}")
            p.data[...] = src
        for name, s in self.bn.items():
            s.mean[...] = state[name + ".running_mean"]
            s.var[...] = state[name + ".running_var"]

    def snapshot(self):
        return OrderedDict((k, v.copy()) for k, v in self.state().items())

    def astype(self, dtype):
        """Recast every array in place (e.g. float64 for gradient checks)."""
        for p in self.params.values():
            p.data = p.data.astype(dtype)
            p.grad = np.zeros_like(p.data)
        for s in self.bn.values():
            s.mean = s.mean.astype(dtype)
            s.var = s.var.astype(dtype)
        return self


def sgd_step(params, lr):
    """``p <- p - lr * grad(p)`` for every parameter, then zero the gradients."""
    for p in params:
        if lr != 0:
            p.data -= (lr * p.grad).astype(p.dtype, copy=False)
        p.grad[...] = 0


def save_checkpoint(path, params, meta=None):
    state = params.state()
    entries = []
    chunks = []
    for name, arr in state.items():
        kind = "param" if name in params.params else "buffer"
        entries.append({"name": name, "shape": list(arr.shape), "kind": kind})
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    header = json.dumps({"entries": entries, "meta": meta or {}}, sort_keys=True).encode()
    blob = MAGIC + struct.pack("<IQ", CKPT_VERSION, len(header)) + header + b"".join(chunks)
    Path(path).write_bytes(blob)
    return path


def read_checkpoint(path):
    """Return ``(state, meta)`` from a checkpoint file."""
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    version, hlen = struct.unpack("<IQ", blob[8:20])
    if version != CKPT_VERSION:
        raise CheckpointError(f"checkpoint version {version}; this build reads {CKPT_VERSION}")
    header = json.loads(blob[20:20 + hlen])
    off = 20 + hlen
    state = OrderedDict()
    for e in header["entries"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        end = off + 4 * n
        if end > len(blob):
            raise CheckpointError(f"checkpoint {path} is truncated at entry {e['name']}")
        state[e["name"]] = np.frombuffer(blob[off:end], "<f4").astype(np.float32).reshape(e["shape"])
        off = end
    if off != len(blob):
        raise CheckpointError(f"checkpoint {path} has {len(blob) - off} trailing bytes")
    return state, header["meta"]
