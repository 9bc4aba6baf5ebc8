"""Small tabular chain used as an exact oracle.

States are one-hot vectors.  The action is a continuous scalar that the
environment bins with fixed thresholds, so a Gaussian policy induces an
exactly computable table of bin probabilities.  Costs and transitions depend
on (state, bin) only, which makes the long-run averages, the differential
Q-functions and the policy gradient available in closed form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from ..nn import backward_params, forward
from ..policy import PolicyParams, _heads
from .base import CmdpEnv

_SQRT_2PI = np.sqrt(2.0 * np.pi)


class OracleError(RuntimeError):
    pass


@dataclass
class ChainMdpConfig:
    costs: np.ndarray          # (I+1, n_states, n_bins) raw costs C_i
    transitions: np.ndarray    # (n_states, n_bins, n_states)
    offsets: np.ndarray        # (I,) constraint levels c_i
    thresholds: np.ndarray     # (n_bins - 1,) increasing cut points on the scalar action

    def __post_init__(self):
        self.costs = np.asarray(self.costs, dtype=np.float64)
        self.transitions = np.asarray(self.transitions, dtype=np.float64)
        self.offsets = np.atleast_1d(np.asarray(self.offsets, dtype=np.float64))
        self.thresholds = np.atleast_1d(np.asarray(self.thresholds, dtype=np.float64))
        n_c, n_s, n_b = self.costs.shape
        if n_s > 8:
            raise ValueError("the oracle chain is limited to 8 states")
        if self.transitions.shape != (n_s, n_b, n_s):
            raise ValueError("transition table shape mismatch")
        if not np.allclose(self.transitions.sum(axis=-1), 1.0) or np.any(self.transitions < 0):
            raise ValueError("transition rows must be probability vectors")
        if self.offsets.shape != (n_c - 1,):
            raise ValueError("need one offset per constraint")
        if self.thresholds.shape != (n_b - 1,) or np.any(np.diff(self.thresholds) <= 0):
            raise ValueError("need n_bins - 1 increasing thresholds")

    @property
    def n_states(self) -> int:
        return self.costs.shape[1]

    @property
    def n_bins(self) -> int:
        return self.costs.shape[2]

    @property
    def shifted_costs(self) -> np.ndarray:
        c = self.costs.copy()
        c[1:] -= self.offsets[:, None, None]
        return c

    @classmethod
    def random(cls, n_states: int = 4, n_bins: int = 2, n_constraints: int = 1, seed: int = 0,
               cost_scale: float = 0.5) -> "ChainMdpConfig":
        rng = np.random.default_rng(seed)
        P = rng.uniform(0.2, 1.0, size=(n_states, n_bins, n_states))
        P /= P.sum(axis=-1, keepdims=True)
        costs = cost_scale * rng.uniform(0.0, 1.0, size=(n_constraints + 1, n_states, n_bins))
        offsets = np.full(n_constraints, 0.5 * cost_scale)
        thresholds = np.linspace(-1.0, 1.0, n_bins + 1)[1:-1] if n_bins > 2 else np.zeros(1)
        return cls(costs, P, offsets, thresholds)

    @classmethod
    def symmetric_two_state(cls, stay: float = 0.7) -> "ChainMdpConfig":
        P = np.empty((2, 2, 2))
        P[0, :, :] = [stay, 1 - stay]
        P[1, :, :] = [1 - stay, stay]
        costs = np.array([[[0.0, 1.0], [1.0, 0.0]], [[1.0, 0.0], [0.0, 1.0]]])
        return cls(costs, P, [0.5], [0.0])

    def to_json(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("costs", "transitions", "offsets", "thresholds")}

    @classmethod
    def from_json(cls, d: dict) -> "ChainMdpConfig":
        return cls(**d)


def action_bins(cfg: ChainMdpConfig, actions) -> np.ndarray:
    return np.searchsorted(cfg.thresholds, np.asarray(actions, dtype=np.float64).reshape(-1), side="right")


def chain_exact_stats(cfg: ChainMdpConfig, policy_table):
    """Exact long-run averages, differential Q-functions and stationary state distribution.

    Returns ``(J, Q, d)`` with J of shape (I+1,), Q of shape (I+1, n_states,
    n_bins) normalized so that sum_{s,b} d(s) pi(b|s) Q(s, b) = 0, and d the
    stationary distribution over states.
    """
    pi = np.asarray(policy_table, dtype=np.float64)
    n_s, n_b = cfg.n_states, cfg.n_bins
    if pi.shape != (n_s, n_b) or not np.allclose(pi.sum(axis=1), 1.0):
        raise ValueError("policy table must be (n_states, n_bins) with rows summing to 1")
    P_pi = np.einsum("sb,sbt->st", pi, cfg.transitions)
    A = P_pi.T - np.eye(n_s)
    if np.linalg.matrix_rank(A, tol=1e-10) != n_s - 1:
        raise OracleError("chain under this policy is not irreducible")
    d, *_ = np.linalg.lstsq(np.vstack([A, np.ones((1, n_s))]), np.concatenate([np.zeros(n_s), [1.0]]), rcond=None)
    if np.any(d <= 0):
        raise OracleError("stationary distribution is not strictly positive")
    sigma = (d[:, None] * pi).ravel()
    C = cfg.shifted_costs.reshape(cfg.costs.shape[0], -1)
    J = C @ sigma
    # M[(s,b), (s',b')] = P(s'|s,b) pi(b'|s')
    M = np.einsum("sbt,tc->sbtc", cfg.transitions, pi).reshape(n_s * n_b, n_s * n_b)
    lhs = np.vstack([np.eye(n_s * n_b) - M, sigma[None, :]])
    Q = np.empty_like(C)
    for i in range(C.shape[0]):
        rhs = np.concatenate([C[i] - J[i], [0.0]])
        Q[i], *_ = np.linalg.lstsq(lhs, rhs, rcond=None)
    return J, Q.reshape(cfg.costs.shape), d


def bellman_residual(cfg: ChainMdpConfig, policy_table, J, Q) -> np.ndarray:
    """Q(s,b) - (C'(s,b) - J + E[Q(s',b')]) for every cost index and pair."""
    pi = np.asarray(policy_table)
    expected_next = np.einsum("sbt,tc,itc->isb", cfg.transitions, pi, Q)
    return Q - (cfg.shifted_costs - np.asarray(J)[:, None, None] + expected_next)


def gaussian_bin_table(cfg: ChainMdpConfig, policy: PolicyParams, state_features) -> np.ndarray:
    """Bin probabilities pi(b|s) of a scalar Gaussian policy at every state."""
    mu, _, log_std, _, _ = _heads(policy, state_features)
    edges = np.concatenate([[-np.inf], cfg.thresholds, [np.inf]])
    z = (edges[None, :] - mu[:, :1]) / np.exp(log_std[:, :1])
    return np.diff(ndtr(z), axis=1)


def exact_policy_gradient(cfg: ChainMdpConfig, policy: PolicyParams, state_features, index: int) -> np.ndarray:
    """Policy-gradient-theorem value sum_s d(s) sum_b Q_i(s,b) grad pi(b|s)."""
    table = gaussian_bin_table(cfg, policy, state_features)
    _, Q, d = chain_exact_stats(cfg, table)
    mu, raw, log_std, mcache, scache = _heads(policy, state_features)
    std = np.exp(log_std[:, 0])
    edges = np.concatenate([[-np.inf], cfg.thresholds, [np.inf]])
    z = (edges[None, :] - mu[:, :1]) / std[:, None]
    pdf = np.where(np.isfinite(z), np.exp(-0.5 * np.where(np.isfinite(z), z, 0.0) ** 2) / _SQRT_2PI, 0.0)
    zpdf = np.where(np.isfinite(z), z, 0.0) * pdf
    # P(b) = Phi(z_hi) - Phi(z_lo)
    dP_dmu = -(pdf[:, 1:] - pdf[:, :-1]) / std[:, None]
    dP_dlogstd = -(zpdf[:, 1:] - zpdf[:, :-1])
    inside = (raw[:, 0] > policy.log_std_min) & (raw[:, 0] < policy.log_std_max)
    weight = d[:, None] * Q[index]
    up_mu = np.sum(weight * dP_dmu, axis=1)[:, None]
    up_ls = (np.sum(weight * dP_dlogstd, axis=1) * inside)[:, None]
    return np.concatenate([backward_params(mcache, policy.mean_net, up_mu),
                           backward_params(scache, policy.std_net, up_ls)])


class ChainEnv(CmdpEnv):
    def __init__(self, cfg: ChainMdpConfig):
        self.cfg = cfg
        self.state_dim = cfg.n_states
        self.action_dim = 1
        self.constraint_offsets = cfg.offsets
        self._shifted = cfg.shifted_costs
        self._cum = np.cumsum(cfg.transitions, axis=-1)

    def one_hot(self, s: int) -> np.ndarray:
        v = np.zeros(self.cfg.n_states)
        v[s] = 1.0
        return v

    def reset(self, rng):
        return self.one_hot(int(rng.integers(self.cfg.n_states)))

    def step(self, state, action, rng):
        s = int(np.argmax(state))
        b = int(action_bins(self.cfg, action)[0])
        nxt = int(np.searchsorted(self._cum[s, b], rng.random(), side="right"))
        nxt = min(nxt, self.cfg.n_states - 1)
        return self.one_hot(nxt), self._shifted[:, s, b].copy()

    def state_features(self, states):
        return np.asarray(states, dtype=np.float64)

    def critic_features(self, states, actions):
        """One-hot encoding of the (state, action bin) pair."""
        S = np.atleast_2d(states)
        idx = np.argmax(S, axis=1) * self.cfg.n_bins + action_bins(self.cfg, actions)
        out = np.zeros((len(S), self.cfg.n_states * self.cfg.n_bins))
        out[np.arange(len(S)), idx] = 1.0
        return out if np.ndim(states) == 2 else out[0]

    def pair_features(self) -> np.ndarray:
        """Critic features for every (state, bin) pair in row-major order."""
        return np.eye(self.cfg.n_states * self.cfg.n_bins)

    def policy_table(self, policy: PolicyParams) -> np.ndarray:
        return gaussian_bin_table(self.cfg, policy, np.eye(self.cfg.n_states))

    def exact_msbe(self, critic, policy, j_hat, index):
        return exact_msbe(self, critic, self.policy_table(policy), j_hat, index)

    def exact_values(self, policy):
        J, _, _ = chain_exact_stats(self.cfg, self.policy_table(policy))
        return J


def exact_msbe(env: ChainEnv, params, policy_table, j_hat: float, index: int) -> float:
    """Bellman error of a critic under the stationary state-action distribution.

    The expectation over the next state and action is taken exactly, so this
    is zero for a critic equal to the differential Q-function (up to a constant).
    """
    cfg = env.cfg
    f, _ = forward(params, env.pair_features())
    f = f[:, 0].reshape(cfg.n_states, cfg.n_bins)
    pi = np.asarray(policy_table)
    _, _, d = chain_exact_stats(cfg, pi)
    target = cfg.shifted_costs[index] - j_hat + np.einsum("sbt,tc,tc->sb", cfg.transitions, pi, f)
    return float(np.sum(d[:, None] * pi * (f - target) ** 2))
