"""Linear-quadratic regulator with one quadratic constraint."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from ..nn import FeatureMap
from .base import CmdpEnv

log = logging.getLogger(__name__)


@dataclass
class LqrConfig:
    n_s: int
    n_a: int
    Q0: np.ndarray
    R0: np.ndarray
    Q1: np.ndarray
    R1: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    noise_std: float
    c1: float
    state_bound: float = 5.0
    action_bound: float = 5.0
    feature_constant: float = 0.5

    def __post_init__(self):
        for name in ("Q0", "R0", "Q1", "R1", "X", "Y"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        expect = {"Q0": (self.n_s, self.n_s), "Q1": (self.n_s, self.n_s), "R0": (self.n_a, self.n_a),
                  "R1": (self.n_a, self.n_a), "X": (self.n_s, self.n_s), "Y": (self.n_s, self.n_a)}
        for name, shape in expect.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} must have shape {shape}, got {getattr(self, name).shape}")
        for name in ("Q0", "R0", "Q1", "R1"):
            m = getattr(self, name)
            if not np.allclose(m, m.T):
                raise ValueError(f"{name} must be symmetric")
            if np.linalg.eigvalsh(m).min() < -1e-10:
                raise ValueError(f"{name} must be positive semidefinite")
        if self.noise_std <= 0:
            raise ValueError("noise_std must be positive")
        rho = self.spectral_radius
        if rho >= 1.0:
            log.warning("open-loop spectral radius %.3f >= 1: zero action is unstable", rho)

    @property
    def spectral_radius(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.X))))

    @classmethod
    def random(cls, n_s: int, n_a: int, seed: int = 0, radius: float = 0.8, noise_std: float = 0.1,
               c1: float = 1.0, state_bound: float = 5.0, action_bound: float = 5.0,
               feature_constant: float = 0.5) -> "LqrConfig":
        """Gaussian X rescaled to the given spectral radius, Gaussian Y, PSD cost matrices."""
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(n_s, n_s))
        X *= radius / np.max(np.abs(np.linalg.eigvals(X)))
        Y = rng.normal(size=(n_s, n_a)) / np.sqrt(n_s)
        B = rng.normal(size=(n_s, n_s)) / np.sqrt(n_s)
        Q0 = B @ B.T + np.eye(n_s)
        R0 = np.eye(n_a)
        Q1 = np.eye(n_s)
        R1 = 0.1 * np.eye(n_a)
        return cls(n_s, n_a, Q0, R0, Q1, R1, X, Y, noise_std, c1, state_bound, action_bound,
                   feature_constant)

    @classmethod
    def reduced(cls, seed: int = 0) -> "LqrConfig":
        return cls.random(4, 2, seed=seed, c1=3.5, noise_std=0.1, state_bound=2.0, action_bound=2.5)

    @classmethod
    def full_scale(cls, seed: int = 0) -> "LqrConfig":
        return cls.random(15, 4, seed=seed, c1=14.0, noise_std=0.1, state_bound=4.0, action_bound=3.0)

    def to_json(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in d.items()}

    @classmethod
    def from_json(cls, d: dict) -> "LqrConfig":
        return cls(**d)


def lqr_step(cfg: LqrConfig, s, a, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(s, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if s.shape != (cfg.n_s,) or a.shape != (cfg.n_a,):
        raise ValueError(f"expected state ({cfg.n_s},) and action ({cfg.n_a},), got {s.shape}, {a.shape}")
    c0 = s @ cfg.Q0 @ s + a @ cfg.R0 @ a
    c1 = s @ cfg.Q1 @ s + a @ cfg.R1 @ a - cfg.c1
    s_next = cfg.X @ s + cfg.Y @ a + cfg.noise_std * rng.standard_normal(cfg.n_s)
    return s_next, np.array([c0, c1])


class LqrEnv(CmdpEnv):
    def __init__(self, cfg: LqrConfig):
        self.cfg = cfg
        self.state_dim = cfg.n_s
        self.action_dim = cfg.n_a
        self.constraint_offsets = np.array([cfg.c1])
        self._phi_s = FeatureMap(np.full(cfg.n_s, cfg.state_bound), cfg.feature_constant)
        self._phi_sa = FeatureMap(np.concatenate([np.full(cfg.n_s, cfg.state_bound),
                                                  np.full(cfg.n_a, cfg.action_bound)]), cfg.feature_constant)

    def reset(self, rng):
        return self.cfg.noise_std * rng.standard_normal(self.cfg.n_s)

    def step(self, state, action, rng):
        return lqr_step(self.cfg, state, action, rng)

    def state_features(self, states):
        return self._phi_s(states)

    def critic_features(self, states, actions):
        return self._phi_sa(np.concatenate([states, actions], axis=-1))

    def to_json(self) -> str:
        return json.dumps(self.cfg.to_json())
