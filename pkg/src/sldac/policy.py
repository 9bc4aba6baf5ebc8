"""Diagonal Gaussian policy with separate mean and log-std networks."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nn import MlpParams, MlpSpec, backward_params, forward, init_params, load_mlp, save_mlp

LOG_2PI = float(np.log(2.0 * np.pi))
LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0


@dataclass
class PolicyParams:
    mean_net: MlpParams
    std_net: MlpParams
    log_std_min: float = LOG_STD_MIN
    log_std_max: float = LOG_STD_MAX

    def __post_init__(self):
        if self.mean_net.spec.d_out != self.std_net.spec.d_out:
            raise ValueError("mean and std networks must have the same output dim")
        if self.mean_net.spec.d_in != self.std_net.spec.d_in:
            raise ValueError("mean and std networks must share the input dim")
        if not self.log_std_min < self.log_std_max:
            raise ValueError("log_std_min must be below log_std_max")

    @property
    def n_actions(self) -> int:
        return self.mean_net.spec.d_out

    @property
    def n_theta(self) -> int:
        return self.mean_net.spec.n_params + self.std_net.spec.n_params

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([self.mean_net.flatten(), self.std_net.flatten()])

    def with_theta(self, theta) -> "PolicyParams":
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.n_theta,):
            raise ValueError(f"expected theta of size {self.n_theta}, got {theta.shape}")
        k = self.mean_net.spec.n_params
        return PolicyParams(
            MlpParams.unflatten(self.mean_net.spec, theta[:k]),
            MlpParams.unflatten(self.std_net.spec, theta[k:]),
            self.log_std_min,
            self.log_std_max,
        )

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.mean_net.copy(), self.std_net.copy(), self.log_std_min, self.log_std_max)


def init_policy(mean_spec: MlpSpec, std_spec: MlpSpec, rng, **clamp) -> PolicyParams:
    return PolicyParams(init_params(mean_spec, rng), init_params(std_spec, rng), **clamp)


@dataclass
class ParamDomain:
    """Coordinate-wise box for the policy parameters."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=np.float64)
        self.upper = np.asarray(self.upper, dtype=np.float64)
        if self.lower.shape != self.upper.shape:
            raise ValueError("bounds must have equal shapes")
        if np.any(self.lower > self.upper):
            raise ValueError("lower bound exceeds upper bound")
        if not (np.all(np.isfinite(self.lower)) and np.all(np.isfinite(self.upper))):
            raise ValueError("box must be bounded")

    @classmethod
    def around(cls, center, half_width: float) -> "ParamDomain":
        center = np.asarray(center, dtype=np.float64)
        return cls(center - half_width, center + half_width)

    def clip(self, theta) -> np.ndarray:
        return np.clip(theta, self.lower, self.upper)

    def contains(self, theta, atol: float = 0.0) -> bool:
        theta = np.asarray(theta)
        return bool(np.all(theta >= self.lower - atol) and np.all(theta <= self.upper + atol))

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.upper - self.lower))


def _heads(params: PolicyParams, features):
    mu, mcache = forward(params.mean_net, features)
    raw, scache = forward(params.std_net, features)
    log_std = np.clip(raw, params.log_std_min, params.log_std_max)
    return mu, raw, log_std, mcache, scache


def mean_and_std(params: PolicyParams, features) -> tuple[np.ndarray, np.ndarray]:
    mu, _, log_std, _, _ = _heads(params, features)
    return mu, np.exp(log_std)


def sample_action(params: PolicyParams, features, rng: np.random.Generator) -> np.ndarray:
    mu, std = mean_and_std(params, features)
    return mu + std * rng.standard_normal(np.shape(mu))


def log_prob(params: PolicyParams, features, action):
    """Log-density of a diagonal Gaussian, normalization included.

    Works row-wise on batches and returns an array in that case.
    """
    mu, _, log_std, _, _ = _heads(params, features)
    a = np.asarray(action, dtype=np.float64)
    z = (a - mu) * np.exp(-log_std)
    return np.sum(-0.5 * LOG_2PI - log_std - 0.5 * z * z, axis=-1)


def _score_upstreams(params, features, action, weights=None):
    mu, raw, log_std, mcache, scache = _heads(params, features)
    a = np.asarray(action, dtype=np.float64)
    inv_var = np.exp(-2.0 * log_std)
    diff = a - mu
    d_mu = diff * inv_var
    # zero where the clamp is active
    inside = (raw > params.log_std_min) & (raw < params.log_std_max)
    d_log_std = (diff * diff * inv_var - 1.0) * inside
    if weights is not None:
        w = np.asarray(weights, dtype=np.float64)[:, None]
        d_mu = d_mu * w
        d_log_std = d_log_std * w
    return d_mu, d_log_std, mcache, scache


def grad_log_prob(params: PolicyParams, features, action) -> np.ndarray:
    """Gradient of log pi(action | state) with respect to theta = [theta_mu, theta_sigma]."""
    d_mu, d_ls, mcache, scache = _score_upstreams(params, features, action)
    return np.concatenate([
        backward_params(mcache, params.mean_net, d_mu),
        backward_params(scache, params.std_net, d_ls),
    ])


def weighted_score_sum(params: PolicyParams, features, actions, weights) -> np.ndarray:
    """sum_n weights[n] * grad log pi(actions[n] | features[n]) in one backward pass."""
    features = np.atleast_2d(features)
    actions = np.atleast_2d(actions)
    d_mu, d_ls, mcache, scache = _score_upstreams(params, features, actions, weights)
    return np.concatenate([
        backward_params(mcache, params.mean_net, d_mu),
        backward_params(scache, params.std_net, d_ls),
    ])


def save_policy(params: PolicyParams, domain: ParamDomain | None, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_mlp(params.mean_net, d / "mean.mlp")
    save_mlp(params.std_net, d / "std.mlp")
    header = {"log_std_min": params.log_std_min, "log_std_max": params.log_std_max, "domain": None}
    if domain is not None:
        header["domain"] = {"lower": domain.lower.tolist(), "upper": domain.upper.tolist()}
    (d / "policy.json").write_text(json.dumps(header))


def load_policy(directory) -> tuple[PolicyParams, ParamDomain | None]:
    d = Path(directory)
    header = json.loads((d / "policy.json").read_text())
    params = PolicyParams(load_mlp(d / "mean.mlp"), load_mlp(d / "std.mlp"),
                          header["log_std_min"], header["log_std_max"])
    dom = header.get("domain")
    domain = ParamDomain(dom["lower"], dom["upper"]) if dom else None
    return params, domain
