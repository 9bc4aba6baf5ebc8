"""Interface shared by the constrained environments."""

from __future__ import annotations

import abc
import csv

import numpy as np


class CmdpEnv(abc.ABC):
    """A constrained MDP with I constraints.

    ``step`` returns the next state and the shifted per-stage costs
    ``(C_0, C_1 - c_1, ..., C_I - c_I)``, so a constraint is satisfied on
    average when its long-run mean is nonpositive.
    """

    state_dim: int
    action_dim: int
    constraint_offsets: np.ndarray

    @property
    def n_costs(self) -> int:
        return len(self.constraint_offsets) + 1

    @abc.abstractmethod
    def reset(self, rng: np.random.Generator) -> np.ndarray: ...

    @abc.abstractmethod
    def step(self, state, action, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]: ...

    @abc.abstractmethod
    def state_features(self, states) -> np.ndarray:
        """Policy input features; every row has Euclidean norm at most 1."""

    @abc.abstractmethod
    def critic_features(self, states, actions) -> np.ndarray:
        """Critic input features for state-action pairs; norms at most 1."""

    @property
    def state_feature_dim(self) -> int:
        return self.state_features(np.zeros(self.state_dim)).shape[-1]

    @property
    def critic_feature_dim(self) -> int:
        return self.critic_features(np.zeros(self.state_dim), np.zeros(self.action_dim)).shape[-1]

    def exact_msbe(self, critic, policy, j_hat: float, index: int) -> float | None:
        """Exact Bellman error of ``critic`` under ``policy`` when the model allows it; None otherwise."""
        return None

    def exact_values(self, policy) -> np.ndarray | None:
        """Exact long-run averages of the shifted costs under ``policy``, if computable."""
        return None


def rollout(env: CmdpEnv, act, steps: int, rng: np.random.Generator, state=None):
    """Run ``act(state) -> action`` for ``steps`` steps; returns (states, actions, costs) arrays."""
    s = env.reset(rng) if state is None else state
    S, A, C = [], [], []
    for _ in range(steps):
        a = np.asarray(act(s), dtype=np.float64)
        s_next, c = env.step(s, a, rng)
        S.append(np.asarray(s, dtype=np.float64))
        A.append(a)
        C.append(c)
        s = s_next
    return np.array(S), np.array(A), np.array(C)


def write_trajectory(path, states, actions, costs) -> None:
    """CSV with columns t, s_0.., a_0.., cost_0.. (one row per step)."""
    S, A, C = (np.atleast_2d(np.asarray(x, dtype=np.float64)) for x in (states, actions, costs))
    header = (["t"] + [f"s_{k}" for k in range(S.shape[1])] + [f"a_{k}" for k in range(A.shape[1])]
              + [f"cost_{k}" for k in range(C.shape[1])])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for t, row in enumerate(np.hstack([S, A, C])):
            w.writerow([t] + [repr(float(v)) for v in row])
