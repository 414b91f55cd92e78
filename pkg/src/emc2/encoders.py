"""Small differentiable encoders phi, psi with hand-written backward passes.

Parameters live in one flat float64 vector ``theta``; a :class:`ParamLayout`
maps named blocks onto slices of it. Unimodal encoders share one block set
between ``phi`` and ``psi``; bimodal encoders get disjoint ``phi/`` and
``psi/`` blocks.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import EncoderSpec
from .errors import ConfigError, NumericError

NORM_FLOOR = 1e-12
SIDES = ("phi", "psi")


@dataclass(frozen=True)
class Block:
    name: str
    offset: int
    shape: tuple

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


@dataclass
class ParamLayout:
    blocks: list = field(default_factory=list)

    def add(self, name, shape):
        self.blocks.append(Block(name, self.size, tuple(shape)))

    @property
    def size(self) -> int:
        return sum(b.size for b in self.blocks)

    def __getitem__(self, name) -> Block:
        for b in self.blocks:
            if b.name == name:
                return b
        raise KeyError(name)

    def view(self, theta, name):
        b = self[name]
        return theta[b.offset:b.offset + b.size].reshape(b.shape)

    def names(self):
        return [b.name for b in self.blocks]


class Encoder:
    """Concrete encoder built from an :class:`EncoderSpec`.

    ``forward`` maps a batch of payloads to features and returns a cache;
    ``backward`` turns feature cotangents into a full-length parameter
    gradient. Payloads are integer row ids for the embedding table and
    ``(n, input_dim)`` float arrays otherwise.
    """

    def __init__(self, spec: EncoderSpec):
        if spec.kind == "embedding-table" and spec.n_items is None:
            raise ConfigError("embedding-table encoder needs n_items")
        self.spec = spec
        self.layout = ParamLayout()
        prefixes = {"phi": "enc/", "psi": "enc/"}
        if spec.modality == "bimodal":
            prefixes = {"phi": "phi/", "psi": "psi/"}
        self.prefix = prefixes
        for pre in dict.fromkeys(prefixes.values()):
            for name, shape in self._block_shapes():
                self.layout.add(pre + name, shape)

    def _block_shapes(self):
        s = self.spec
        d = s.feature_dim
        if s.kind == "embedding-table":
            return [("table", (s.n_items, d))]
        if s.kind == "linear":
            return [("W", (d, s.input_dim))]
        h = s.hidden_dim
        return [("W1", (h, s.input_dim)), ("b1", (h,)), ("W2", (d, h)), ("b2", (d,))]

    @property
    def n_params(self) -> int:
        return self.layout.size

    @property
    def shared(self) -> bool:
        return self.spec.modality == "unimodal"

    @property
    def norm_bound(self) -> float:
        return 1.0 if self.spec.normalize else self.spec.norm_bound

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        s = self.spec
        theta = np.zeros(self.n_params)
        for block in self.layout.blocks:
            leaf = block.name.split("/")[-1]
            if leaf == "table":
                fan_in = s.feature_dim
            elif leaf in ("W", "W1"):
                fan_in = s.input_dim
            elif leaf == "W2":
                fan_in = s.hidden_dim
            else:
                continue
            vals = rng.standard_normal(block.size) / np.sqrt(fan_in)
            theta[block.offset:block.offset + block.size] = vals
        return theta

    def check_params(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.n_params,):
            raise ConfigError(f"parameter vector has shape {theta.shape}, encoder needs ({self.n_params},)")
        return theta

    def check_payloads(self, payloads):
        s = self.spec
        if s.kind == "embedding-table":
            idx = np.asarray(payloads)
            if idx.dtype.kind not in "iu":
                raise ConfigError("embedding-table payloads must be integer row ids")
            if idx.size and (idx.min() < 0 or idx.max() >= s.n_items):
                raise ConfigError(f"row id out of range [0, {s.n_items})")
            return idx.reshape(-1)
        x = np.asarray(payloads, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != s.input_dim:
            raise ConfigError(f"payload dimension {x.shape[-1]} does not match input_dim {s.input_dim}")
        return x

    def _w(self, theta, side, leaf):
        return self.layout.view(theta, self.prefix[side] + leaf)

    def forward(self, theta, payloads, side="phi"):
        """Features for a batch of payloads; returns ``(features, cache)``."""
        if side not in SIDES:
            raise ValueError(f"side must be one of {SIDES}")
        theta = self.check_params(theta)
        x = self.check_payloads(payloads)
        kind = self.spec.kind
        cache = {"side": side, "x": x}
        if kind == "embedding-table":
            raw = self._w(theta, side, "table")[x]
        elif kind == "linear":
            raw = x @ self._w(theta, side, "W").T
        else:
            hid = np.tanh(x @ self._w(theta, side, "W1").T + self._w(theta, side, "b1"))
            cache["hid"] = hid
            raw = hid @ self._w(theta, side, "W2").T + self._w(theta, side, "b2")
        if self.spec.normalize:
            norm = np.linalg.norm(raw, axis=1, keepdims=True)
            denom = np.maximum(norm, NORM_FLOOR)
            feats = raw / denom
            cache["denom"] = denom
            cache["floored"] = norm <= NORM_FLOOR
            cache["feats"] = feats
        else:
            feats = raw
        if not np.all(np.isfinite(feats)):
            raise NumericError("encoder produced non-finite features")
        return feats, cache

    def backward(self, theta, cache, grad_feats, out=None):
        """Accumulate ``J^T grad_feats`` into a full-length gradient vector."""
        theta = self.check_params(theta)
        g = np.asarray(grad_feats, dtype=np.float64)
        out = np.zeros(self.n_params) if out is None else out
        side, x = cache["side"], cache["x"]
        if self.spec.normalize:
            v = cache["feats"]
            proj = g - v * np.sum(v * g, axis=1, keepdims=True)
            g = np.where(cache["floored"], g, proj) / cache["denom"]
        pre = self.prefix[side]
        kind = self.spec.kind
        if kind == "embedding-table":
            gt = self.layout.view(out, pre + "table")
            np.add.at(gt, x, g)
        elif kind == "linear":
            self.layout.view(out, pre + "W")[...] += g.T @ x
        else:
            hid = cache["hid"]
            self.layout.view(out, pre + "W2")[...] += g.T @ hid
            self.layout.view(out, pre + "b2")[...] += g.sum(axis=0)
            gh = (g @ self._w(theta, side, "W2")) * (1.0 - hid**2)
            self.layout.view(out, pre + "W1")[...] += gh.T @ x
            self.layout.view(out, pre + "b1")[...] += gh.sum(axis=0)
        return out


def encode(payload, theta, encoder: Encoder, side="phi"):
    """phi(x; theta) or psi(x; theta) for a single payload."""
    feats, _ = encoder.forward(theta, _one(payload, encoder), side)
    return feats[0]


def similarity(x, y, theta, encoder: Encoder) -> float:
    return float(encode(x, theta, encoder, "phi") @ encode(y, theta, encoder, "psi"))


def grad_similarity(x, y, theta, encoder: Encoder) -> np.ndarray:
    """H(x, y; theta): gradient of phi(x)^T psi(y) with respect to theta."""
    fx, cx = encoder.forward(theta, _one(x, encoder), "phi")
    fy, cy = encoder.forward(theta, _one(y, encoder), "psi")
    out = encoder.backward(theta, cx, fy)
    return encoder.backward(theta, cy, fx, out=out)


def fd_grad_similarity(x, y, theta, encoder: Encoder, h=1e-5) -> np.ndarray:
    """Central finite differences of :func:`similarity`, one coordinate at a time."""
    if not h > 0:
        raise ValueError("finite-difference step h must be positive")
    theta = encoder.check_params(theta)
    grad = np.zeros_like(theta)
    work = theta.copy()
    for i in range(theta.size):
        work[i] = theta[i] + h
        up = similarity(x, y, work, encoder)
        work[i] = theta[i] - h
        down = similarity(x, y, work, encoder)
        work[i] = theta[i]
        grad[i] = (up - down) / (2 * h)
    if not np.all(np.isfinite(grad)):
        raise NumericError("finite differences produced non-finite values")
    return grad


def _one(payload, encoder):
    if encoder.spec.kind == "embedding-table":
        return np.asarray([payload]).reshape(1).astype(np.int64)
    return np.asarray(payload, dtype=np.float64).reshape(1, -1)
