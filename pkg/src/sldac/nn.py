"""Fully-connected ReLU networks with a sqrt(width) output scale.

The network is

    f(x) = sqrt(m) * W_L relu(W_{L-1} ... relu(W_1 x))

with no bias terms and a single hidden width ``m``.  Everything is float64.
Forward and backward passes accept a single input vector or a batch of
inputs stacked row-wise; the backward pass always returns the gradient
summed over the batch, weighted by the per-row upstream vectors.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class StaleCacheError(RuntimeError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    depth: int
    width: int
    d_in: int
    d_out: int

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        for name in ("width", "d_in", "d_out"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def shapes(self) -> list[tuple[int, int]]:
        m = self.width
        return [(m, self.d_in)] + [(m, m)] * (self.depth - 2) + [(self.d_out, m)]

    @property
    def n_params(self) -> int:
        return sum(r * c for r, c in self.shapes)

    @property
    def output_scale(self) -> float:
        return float(np.sqrt(self.width))


@dataclass
class MlpParams:
    spec: MlpSpec
    weights: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != self.spec.depth:
            raise ShapeError(f"expected {self.spec.depth} layers, got {len(self.weights)}")
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        for l, (w, shape) in enumerate(zip(self.weights, self.spec.shapes)):
            if w.shape != shape:
                raise ShapeError(f"layer {l}: expected shape {shape}, got {w.shape}")

    def flatten(self) -> np.ndarray:
        return np.concatenate([w.ravel() for w in self.weights])

    @classmethod
    def unflatten(cls, spec: MlpSpec, flat: np.ndarray) -> "MlpParams":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (spec.n_params,):
            raise ShapeError(f"expected flat vector of {spec.n_params}, got {flat.shape}")
        weights, pos = [], 0
        for r, c in spec.shapes:
            weights.append(flat[pos:pos + r * c].reshape(r, c).copy())
            pos += r * c
        return cls(spec, weights)

    @classmethod
    def zeros(cls, spec: MlpSpec) -> "MlpParams":
        return cls(spec, [np.zeros(s) for s in spec.shapes])

    def copy(self) -> "MlpParams":
        return MlpParams(self.spec, [w.copy() for w in self.weights])

    def sq_distance(self, other: "MlpParams") -> float:
        return float(sum(np.sum((a - b) ** 2) for a, b in zip(self.weights, other.weights)))

    def layer_distances(self, other: "MlpParams") -> np.ndarray:
        return np.array([np.linalg.norm(a - b) for a, b in zip(self.weights, other.weights)])


@dataclass
class ForwardCache:
    inputs: np.ndarray            # (n, d_in)
    pre: list[np.ndarray]         # pre-activations of hidden layers, each (n, m)
    post: list[np.ndarray]        # relu outputs of hidden layers, each (n, m)
    output: np.ndarray            # (n, d_out)
    batched: bool
    fingerprint: tuple


def _fingerprint(params: MlpParams) -> tuple:
    return tuple((id(w), float(w.sum()), float(np.abs(w).sum())) for w in params.weights)


def init_params(spec: MlpSpec, seed) -> MlpParams:
    """Draw every weight i.i.d. from N(0, 1/m^2).

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    std = 1.0 / spec.width
    return MlpParams(spec, [rng.normal(0.0, std, size=s) for s in spec.shapes])


def relu(z):
    return np.maximum(z, 0.0)


def forward(params: MlpParams, features) -> tuple[np.ndarray, ForwardCache]:
    x = np.asarray(features, dtype=np.float64)
    batched = x.ndim == 2
    X = x if batched else x[None, :]
    if X.ndim != 2 or X.shape[1] != params.spec.d_in:
        raise ShapeError(f"expected input dim {params.spec.d_in}, got {x.shape}")

    pre, post = [], []
    h = X
    for w in params.weights[:-1]:
        z = h @ w.T
        h = relu(z)
        pre.append(z)
        post.append(h)
    out = params.spec.output_scale * (h @ params.weights[-1].T)
    cache = ForwardCache(X, pre, post, out, batched, _fingerprint(params))
    return (out if batched else out[0]), cache


def backward_params(cache: ForwardCache, params: MlpParams, upstream) -> np.ndarray:
    """Flat gradient of sum_n upstream[n] . output[n] with respect to all weights."""
    if cache.fingerprint != _fingerprint(params):
        raise StaleCacheError("cache was produced with different parameters")
    u = np.asarray(upstream, dtype=np.float64)
    U = u if cache.batched else u[None, :]
    if U.shape != cache.output.shape:
        raise ShapeError(f"upstream shape {u.shape} does not match output {cache.output.shape}")

    grads = [None] * params.spec.depth
    delta = params.spec.output_scale * U                 # d/d(last pre-scale output)
    grads[-1] = delta.T @ cache.post[-1]
    back = delta @ params.weights[-1]
    for l in range(params.spec.depth - 2, -1, -1):
        # relu'(0) := 0
        back = back * (cache.pre[l] > 0.0)
        below = cache.post[l - 1] if l > 0 else cache.inputs
        grads[l] = back.T @ below
        if l > 0:
            back = back @ params.weights[l]
    return np.concatenate([g.ravel() for g in grads])


def project_per_layer_ball(params: MlpParams, anchor: MlpParams, radius: float) -> MlpParams:
    """Project each layer onto the Frobenius ball of ``radius`` around the anchor layer."""
    if radius < 0:
        raise ValueError("radius must be nonnegative")
    if params.spec.shapes != anchor.spec.shapes:
        raise ShapeError("params and anchor shapes differ")
    out = []
    for w, w0 in zip(params.weights, anchor.weights):
        diff = w - w0
        dist = np.linalg.norm(diff)
        if dist > radius:
            w = w0 + diff * (radius / dist)
            # rounding can leave the rescaled layer a hair outside the ball;
            # shrink by growing margins, reaching the anchor itself after 52 tries
            k = 53
            while np.linalg.norm(w - w0) > radius:
                k -= 1
                w = w0 + diff * ((radius / dist) * (1.0 - 2.0 ** -k)) if k > 0 else w0.copy()
        out.append(w)
    return MlpParams(params.spec, out)


class FeatureMap:
    """Scale a raw input by a fixed bound and clip radially to the unit ball.

    With ``constant`` in (0, 1) a fixed coordinate of that value is appended
    and the scaled input is shrunk to radius sqrt(1 - constant**2).  The
    networks have no biases, so without it their output vanishes at x = 0.
    """

    def __init__(self, bound, constant: float = 0.0):
        self.bound = np.asarray(bound, dtype=np.float64)
        if np.any(self.bound <= 0):
            raise ValueError("feature bounds must be positive")
        if not 0.0 <= constant < 1.0:
            raise ValueError("constant must lie in [0, 1)")
        self.constant = float(constant)

    @property
    def out_dim(self) -> int:
        return self.bound.size + (1 if self.constant else 0)

    def __call__(self, x) -> np.ndarray:
        z = np.asarray(x, dtype=np.float64) / self.bound
        norm = np.linalg.norm(z, axis=-1, keepdims=True)
        scale = np.where(norm > 1.0, 1.0 / np.maximum(norm, 1e-300), 1.0)
        z = z * scale
        if not self.constant:
            return z
        z = z * np.sqrt(1.0 - self.constant ** 2)
        c = np.full(z.shape[:-1] + (1,), self.constant)
        return np.concatenate([z, c], axis=-1)


# .mlp files: header of four little-endian int32 (L, m, d_in, d_out), then the
# flat parameter vector as little-endian float64.
_HEADER = struct.Struct("<4i")


def save_mlp(params: MlpParams, path) -> None:
    s = params.spec
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(s.depth, s.width, s.d_in, s.d_out))
        fh.write(params.flatten().astype("<f8").tobytes())


def load_mlp(path) -> MlpParams:
    data = Path(path).read_bytes()
    depth, width, d_in, d_out = _HEADER.unpack_from(data, 0)
    spec = MlpSpec(depth, width, d_in, d_out)
    flat = np.frombuffer(data, dtype="<f8", offset=_HEADER.size)
    if flat.size != spec.n_params:
        raise ShapeError(f"{path}: expected {spec.n_params} values, found {flat.size}")
    return MlpParams.unflatten(spec, flat.astype(np.float64))


def stack_flat(parts: Sequence[MlpParams]) -> np.ndarray:
    return np.concatenate([p.flatten() for p in parts])
