"""Projected TD(0) critics for average-cost Q-functions.

Each cost index owns a :class:`CriticPair`: a raw network updated by TD(0)
inside a per-layer Frobenius ball around its initialization, and an averaged
copy that tracks the raw iterates and is the one used for policy gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .nn import MlpParams, MlpSpec, backward_params, forward, init_params, load_mlp, project_per_layer_ball, save_mlp


@dataclass(frozen=True)
class Observation:
    s: np.ndarray
    a: np.ndarray
    shifted_costs: np.ndarray
    s_next: np.ndarray

    def __post_init__(self):
        for name in ("s", "a", "shifted_costs", "s_next"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=np.float64)))
        if not np.all(np.isfinite(self.shifted_costs)):
            raise ValueError("costs must be finite")

    def to_json(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("s", "a", "shifted_costs", "s_next")}

    @classmethod
    def from_json(cls, d: dict) -> "Observation":
        return cls(d["s"], d["a"], d["shifted_costs"], d["s_next"])


def stack_observations(batch: Sequence[Observation]):
    """Stack a sequence of observations into (S, A, C, S_next) arrays."""
    return (np.stack([o.s for o in batch]), np.stack([o.a for o in batch]),
            np.stack([o.shifted_costs for o in batch]), np.stack([o.s_next for o in batch]))


Featurizer = Callable[[np.ndarray, np.ndarray], np.ndarray]


def default_radius(width: int, depth: int, a0: float = 10.0) -> float:
    return a0 * width ** -0.5 * depth ** (-4.0 / 9.0)


@dataclass
class CriticPair:
    raw: MlpParams
    averaged: MlpParams
    anchor: MlpParams
    radius: float

    def copy(self) -> "CriticPair":
        return CriticPair(self.raw.copy(), self.averaged.copy(), self.anchor.copy(), self.radius)


@dataclass
class CriticBank:
    pairs: list[CriticPair] = field(default_factory=list)

    def __post_init__(self):
        specs = {p.raw.spec for p in self.pairs}
        if len(specs) > 1:
            raise ValueError("all critics must share one network spec")

    def __len__(self):
        return len(self.pairs)

    def __getitem__(self, i) -> CriticPair:
        return self.pairs[i]

    @classmethod
    def create(cls, spec: MlpSpec, n_costs: int, rng, radius: float) -> "CriticBank":
        pairs = []
        for _ in range(n_costs):
            anchor = init_params(spec, rng)
            pairs.append(CriticPair(anchor.copy(), anchor.copy(), anchor, radius))
        return cls(pairs)

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for i, p in enumerate(self.pairs):
            for kind in ("raw", "averaged", "anchor"):
                save_mlp(getattr(p, kind), d / f"critic{i}_{kind}.mlp")

    @classmethod
    def load(cls, directory, n_costs: int, radius: float) -> "CriticBank":
        d = Path(directory)
        return cls([CriticPair(*(load_mlp(d / f"critic{i}_{k}.mlp") for k in ("raw", "averaged", "anchor")), radius)
                    for i in range(n_costs)])


def _as_batch(obs):
    if isinstance(obs, Observation):
        return [obs]
    return list(obs)


def td_direction(params: MlpParams, x, x_next, costs, j_hat_prev: float) -> tuple[np.ndarray, np.ndarray]:
    """Batch-mean TD(0) direction and the per-sample TD errors.

    delta_n = f(x_n) - (c_n - j_hat + f(x'_n)); direction = mean_n delta_n grad f(x_n).
    """
    f, cache = forward(params, x)
    f_next, _ = forward(params, x_next)
    err = f[:, 0] - (np.asarray(costs, dtype=np.float64) - j_hat_prev + f_next[:, 0])
    upstream = (err / len(err))[:, None]
    return backward_params(cache, params, upstream), err


def td_step(pair: CriticPair, obs, index: int, j_hat_prev: float, a_next, eta: float,
            featurize: Featurizer) -> CriticPair:
    """One projected TD(0) step on the raw critic; ``obs`` may be one observation or a minibatch.

    ``a_next`` holds the next-state action(s) drawn from the current policy, one per observation.
    """
    batch = _as_batch(obs)
    if not batch:
        raise ValueError("empty observation batch")
    if eta <= 0:
        raise ValueError("eta must be positive")
    S, A, C, S2 = stack_observations(batch)
    if not 0 <= index < C.shape[1]:
        raise IndexError(f"cost index {index} out of range 0..{C.shape[1] - 1}")
    A2 = np.atleast_2d(np.asarray(a_next, dtype=np.float64)).reshape(len(batch), -1)
    direction, _ = td_direction(pair.raw, featurize(S, A), featurize(S2, A2), C[:, index], j_hat_prev)
    moved = MlpParams.unflatten(pair.raw.spec, pair.raw.flatten() - eta * direction)
    raw = project_per_layer_ball(moved, pair.anchor, pair.radius)
    return CriticPair(raw, pair.averaged, pair.anchor, pair.radius)


def average_step(pair: CriticPair, gamma: float) -> CriticPair:
    if not 0.0 < gamma <= 1.0:
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
    if gamma == 1.0:
        averaged = pair.raw.copy()
    else:
        averaged = MlpParams(pair.raw.spec, [(1.0 - gamma) * wb + gamma * w
                                             for wb, w in zip(pair.averaged.weights, pair.raw.weights)])
    return CriticPair(pair.raw, averaged, pair.anchor, pair.radius)


def q_value(pair: CriticPair, s, a, featurize: Featurizer, use_raw: bool = False):
    """Critic output on phi(s, a); batched inputs give an array."""
    params = pair.raw if use_raw else pair.averaged
    out, _ = forward(params, featurize(np.asarray(s, dtype=np.float64), np.asarray(a, dtype=np.float64)))
    return out[..., 0]


def msbe_estimate(pair: CriticPair, batch: Sequence[Observation], index: int, j_hat: float, a_next,
                  featurize: Featurizer, use_raw: bool = True) -> float:
    """Sample mean of squared TD errors over ``batch``.

    ``a_next`` are next-state actions drawn from the policy by the caller.
    """
    batch = _as_batch(batch)
    if not batch:
        raise ValueError("msbe needs a nonempty batch")
    S, A, C, S2 = stack_observations(batch)
    A2 = np.atleast_2d(np.asarray(a_next, dtype=np.float64)).reshape(len(batch), -1)
    params = pair.raw if use_raw else pair.averaged
    f, _ = forward(params, featurize(S, A))
    f_next, _ = forward(params, featurize(S2, A2))
    err = f[:, 0] - (C[:, index] - j_hat + f_next[:, 0])
    return float(np.mean(err * err))
