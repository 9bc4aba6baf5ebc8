"""Actor step: off-policy surrogate estimation and the convex subproblems.

The surrogate for cost index i anchored at theta_t is

    Jbar_i(theta) = j_hat_i + g_hat_i . (theta - theta_t) + zeta_i ||theta - theta_t||^2

Both subproblems are solved through their Lagrange duals.  For any
nonnegative weight vector w over the surrogates the inner minimization over
the box separates per coordinate and has the closed form

    theta(w) = clip(theta_t - (sum_i w_i g_i) / (2 sum_i w_i zeta_i))

so only the low-dimensional dual is iterated.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .critic import CriticPair, Observation
from .nn import forward
from .policy import ParamDomain, PolicyParams, weighted_score_sum

OBJECTIVE = "objective-feasible"
FALLBACK = "feasibility-fallback"

# assert the KKT conditions after every successful solve (the test-suite turns this on)
CHECK_KKT = os.environ.get("SLDAC_CHECK_KKT", "") == "1"


class SolverError(RuntimeError):
    def __init__(self, message, best: "SubproblemSolution"):
        super().__init__(message)
        self.best = best


class InfeasibleSubproblem(RuntimeError):
    """The surrogate-constrained problem has no feasible point; carries the fallback solution."""

    def __init__(self, fallback: "SubproblemSolution"):
        super().__init__(f"surrogate problem infeasible (y* = {fallback.y_star:.3e})")
        self.fallback = fallback


class ReplayStorage:
    """Ring buffer of the most recent observations, kept as flat arrays."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._arrays = None
        self._head = 0          # next write slot
        self._size = 0

    def __len__(self):
        return self._size

    def push(self, obs: Observation) -> None:
        if self._arrays is None:
            self._arrays = tuple(np.zeros((self.capacity, v.size))
                                 for v in (obs.s, obs.a, obs.shifted_costs, obs.s_next))
        for buf, v in zip(self._arrays, (obs.s, obs.a, obs.shifted_costs, obs.s_next)):
            buf[self._head] = v
        self._head = (self._head + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def extend(self, observations) -> None:
        for o in observations:
            self.push(o)

    def _order(self, length):
        n = self._size if length is None else length
        if n < 1:
            raise ValueError("replay window is empty")
        if n > self._size:
            raise ValueError(f"requested window {n} exceeds stored {self._size}")
        return (np.arange(self._head - n, self._head)) % self.capacity

    def window(self, length: int | None = None):
        """(S, A, C, S_next) for the latest ``length`` observations in arrival order."""
        idx = self._order(length)
        return tuple(buf[idx] for buf in self._arrays)

    def observations(self, length: int | None = None) -> list[Observation]:
        S, A, C, S2 = self.window(length)
        return [Observation(*row) for row in zip(S, A, C, S2)]

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            if self._size:
                for o in self.observations():
                    fh.write(json.dumps(o.to_json()) + "\n")

    @classmethod
    def load(cls, path, capacity: int | None = None) -> "ReplayStorage":
        lines = [l for l in Path(path).read_text().splitlines() if l.strip()]
        obs = [Observation.from_json(json.loads(l)) for l in lines]
        storage = cls(capacity or max(len(obs), 1))
        storage.extend(obs)
        return storage


def window_length(t: int, mode: str = "fixed", length: int = 1000, max_length: int = 1000,
                  log_scale: float = 100.0) -> int:
    """Window size T_t for iteration t (0-based): a constant, or min(T_max, ceil(C ln(t+2)))."""
    if mode == "fixed":
        return length
    if mode == "log":
        return int(min(max_length, math.ceil(log_scale * math.log(t + 2))))
    raise ValueError(f"unknown window mode {mode!r}")


def estimate_value(storage: ReplayStorage, index: int, length: int | None = None) -> float:
    _, _, C, _ = storage.window(length)
    return float(C[:, index].mean())


def estimate_gradient(storage: ReplayStorage, index: int, critic: CriticPair, policy: PolicyParams,
                      state_features: Callable, critic_features: Callable,
                      length: int | None = None) -> np.ndarray:
    """Off-policy gradient estimate: mean of Qbar(s_l, a_l) * score(a_l | s_l) at the current policy."""
    S, A, _, _ = storage.window(length)
    q, _ = forward(critic.averaged, critic_features(S, A))
    return weighted_score_sum(policy, state_features(S), A, q[:, 0] / len(S))


def estimate_gradient_mc(storage: ReplayStorage, index: int, policy: PolicyParams, truncation_len: int,
                         state_features: Callable, length: int | None = None) -> np.ndarray:
    """Same estimator with the critic replaced by truncated centered empirical returns."""
    S, A, C, _ = storage.window(length)
    n = len(S)
    if truncation_len < 1 or n < truncation_len:
        raise ValueError(f"window of {n} is shorter than truncation length {truncation_len}")
    centered = C[:, index] - C[:, index].mean()
    csum = np.concatenate([[0.0], np.cumsum(centered)])
    usable = n - truncation_len + 1
    returns = csum[truncation_len:truncation_len + usable] - csum[:usable]
    return weighted_score_sum(policy, state_features(S[:usable]), A[:usable], returns / usable)


def recursive_average(prev, fresh, alpha: float):
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    if alpha == 1.0:
        return np.array(fresh, dtype=np.float64) if np.ndim(fresh) else float(fresh)
    return (1.0 - alpha) * prev + alpha * fresh


def mix_theta(theta_t, theta_bar, beta: float) -> np.ndarray:
    if not 0.0 < beta <= 1.0:
        raise ValueError(f"beta must lie in (0, 1], got {beta}")
    return (1.0 - beta) * np.asarray(theta_t) + beta * np.asarray(theta_bar)


@dataclass
class SurrogateState:
    j_hat: np.ndarray       # (I+1,)
    g_hat: np.ndarray       # (I+1, n_theta)
    zeta: np.ndarray        # (I+1,)
    theta: np.ndarray       # anchor theta_t

    def __post_init__(self):
        self.j_hat = np.atleast_1d(np.asarray(self.j_hat, dtype=np.float64))
        self.g_hat = np.atleast_2d(np.asarray(self.g_hat, dtype=np.float64))
        self.zeta = np.broadcast_to(np.asarray(self.zeta, dtype=np.float64), self.j_hat.shape).copy()
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.g_hat.shape != (self.j_hat.size, self.theta.size):
            raise ValueError(f"g_hat shape {self.g_hat.shape} inconsistent with "
                             f"{self.j_hat.size} costs and theta of size {self.theta.size}")
        if np.any(self.zeta <= 0):
            raise ValueError("zeta must be positive")

    @property
    def n_constraints(self) -> int:
        return self.j_hat.size - 1

    def values(self, theta) -> np.ndarray:
        """All surrogate values at ``theta``."""
        d = np.asarray(theta) - self.theta
        return self.j_hat + self.g_hat @ d + self.zeta * (d @ d)


def surrogate_eval(state: SurrogateState, index: int, theta) -> float:
    d = np.asarray(theta, dtype=np.float64) - state.theta
    return float(state.j_hat[index] + state.g_hat[index] @ d + state.zeta[index] * (d @ d))


@dataclass
class SubproblemSolution:
    theta_bar: np.ndarray
    multipliers: np.ndarray
    status: str
    y_star: float = float("nan")
    iterations: int = 0
    residual: float = 0.0
    surrogate_values: np.ndarray = field(default=None, repr=False)


def _inner_argmin(state: SurrogateState, domain: ParamDomain, w: np.ndarray) -> np.ndarray:
    curv = 2.0 * float(w @ state.zeta)
    return domain.clip(state.theta - (w @ state.g_hat) / curv)


def _project_simplex(v: np.ndarray) -> np.ndarray:
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / k > 0)[0][-1]
    return np.maximum(v - css[rho] / (rho + 1.0), 0.0)


def _dual_ascent(state, domain, lam0, project, weights_of, tol, max_iters, converged):
    """Accelerated projected gradient ascent on a concave dual.

    The dual gradient at lam is the vector of constraint surrogates at
    theta(lam).  Steps start at 1 / (2 max(zeta) diam(box)) and are accepted
    when the local gradient Lipschitz estimate is below 1/step, halving
    otherwise and doubling after each accepted step.  Acceptance and momentum
    restarts use gradients only: near the optimum the dual value changes by
    less than float64 resolution.
    """
    def evaluate(lam):
        th = _inner_argmin(state, domain, weights_of(lam))
        return th, state.values(th)

    lam = project(np.asarray(lam0, dtype=np.float64))
    theta, vals = evaluate(lam)
    step = 1.0 / (2.0 * float(state.zeta.max()) * max(domain.diameter, 1e-12))
    y, y_vals = lam, vals
    momentum = 1.0
    for it in range(1, max_iters + 1):
        dual = float(weights_of(lam) @ vals)
        done, residual = converged(lam, theta, vals, dual)
        if done:
            return lam, theta, vals, it - 1, residual, True
        grad = y_vals[1:]
        while True:
            cand = project(y + step * grad)
            d = cand - y
            th_c, vals_c = evaluate(cand)
            dist = float(np.linalg.norm(d))
            if dist == 0.0 or step * float(np.linalg.norm(vals_c[1:] - grad)) <= dist:
                break
            step *= 0.5
        if vals_c[1:] @ (cand - lam) < 0.0:
            # momentum points downhill: restart from cand without extrapolation
            momentum = 1.0
            lam, theta, vals = cand, th_c, vals_c
            y, y_vals = cand, vals_c
            continue
        nxt = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * momentum * momentum))
        extrapolated = project(cand + ((momentum - 1.0) / nxt) * (cand - lam))
        momentum = nxt
        lam, theta, vals = cand, th_c, vals_c
        if np.array_equal(extrapolated, cand):
            y, y_vals = cand, vals_c
        else:
            y = extrapolated
            _, y_vals = evaluate(y)
        step *= 2.0
    dual = float(weights_of(lam) @ vals)
    done, residual = converged(lam, theta, vals, dual)
    return lam, theta, vals, max_iters, residual, done


def solve_feasibility_subproblem(state: SurrogateState, domain: ParamDomain, tol: float = 1e-8,
                                 max_iters: int = 10_000, lam0=None) -> SubproblemSolution:
    """min over the box of max_i Jbar_i (i >= 1), via the dual over the probability simplex."""
    n_c = state.n_constraints
    if n_c < 1:
        raise ValueError("feasibility problem needs at least one constraint")
    start = np.full(n_c, 1.0 / n_c) if lam0 is None or np.sum(lam0) <= 0 else np.asarray(lam0, float)

    def weights(lam):
        return np.concatenate([[0.0], lam])

    def converged(lam, theta, vals, dual):
        gap = float(vals[1:].max()) - dual
        return gap <= tol, gap

    lam, theta, vals, iters, gap, ok = _dual_ascent(
        state, domain, start, _project_simplex, weights, tol, max_iters, converged)
    sol = SubproblemSolution(theta, lam, FALLBACK, float(vals[1:].max()), iters, gap, vals)
    if not ok:
        raise SolverError(f"feasibility dual did not converge in {max_iters} iterations (gap {gap:.2e})", sol)
    if CHECK_KKT:
        _assert_kkt(state, domain, sol, tol)
    return sol


def solve_objective_subproblem(state: SurrogateState, domain: ParamDomain, tol: float = 1e-8,
                               max_iters: int = 10_000, lam0=None,
                               precheck: bool = True) -> SubproblemSolution:
    """argmin Jbar_0 over the box subject to Jbar_i <= 0.

    Raises :class:`InfeasibleSubproblem` (carrying the feasibility solution)
    when min max_i Jbar_i exceeds ``tol``.
    """
    n_c = state.n_constraints
    if n_c == 0:
        theta = _inner_argmin(state, domain, np.ones(1))
        return SubproblemSolution(theta, np.zeros(0), OBJECTIVE, iterations=0, surrogate_values=state.values(theta))
    if precheck:
        fb = solve_feasibility_subproblem(state, domain, tol, max_iters)
        if fb.y_star > tol:
            raise InfeasibleSubproblem(fb)
    start = np.zeros(n_c) if lam0 is None else np.maximum(np.asarray(lam0, dtype=np.float64), 0.0)

    def weights(lam):
        return np.concatenate([[1.0], lam])

    def converged(lam, theta, vals, dual):
        g = vals[1:]
        proj_res = np.abs(lam - np.maximum(lam + g, 0.0))
        residual = max(float(proj_res.max()), float(np.max(np.abs(lam * g))), float(max(g.max(), 0.0)))
        return residual <= tol, residual

    def project(lam):
        return np.maximum(lam, 0.0)

    lam, theta, vals, iters, residual, ok = _dual_ascent(
        state, domain, start, project, weights, tol, max_iters, converged)
    sol = SubproblemSolution(theta, lam, OBJECTIVE, float("nan"), iters, residual, vals)
    if not ok:
        if not precheck:
            # a diverging dual usually means an empty feasible set
            fb = solve_feasibility_subproblem(state, domain, tol, max_iters)
            if fb.y_star > tol:
                raise InfeasibleSubproblem(fb)
        raise SolverError(f"objective dual did not converge in {max_iters} iterations (residual {residual:.2e})", sol)
    if CHECK_KKT:
        _assert_kkt(state, domain, sol, tol)
    return sol


def solve_surrogate_problem(state: SurrogateState, domain: ParamDomain, tol: float = 1e-8,
                            max_iters: int = 10_000, lam0=None) -> SubproblemSolution:
    """Objective update when feasible, otherwise the feasibility fallback."""
    try:
        return solve_objective_subproblem(state, domain, tol, max_iters, lam0)
    except InfeasibleSubproblem as exc:
        return exc.fallback


def kkt_residuals(state: SurrogateState, domain: ParamDomain, sol: SubproblemSolution) -> dict:
    """Complementary slackness, primal feasibility and projected stationarity of the Lagrangian."""
    vals = state.values(sol.theta_bar)
    if sol.status == OBJECTIVE:
        w = np.concatenate([[1.0], sol.multipliers])
        g = vals[1:]
        slack = float(np.max(np.abs(sol.multipliers * g))) if g.size else 0.0
        feas = float(max(g.max(), 0.0)) if g.size else 0.0
    else:
        w = np.concatenate([[0.0], sol.multipliers])
        g = vals[1:] - sol.y_star
        slack = float(np.max(np.abs(sol.multipliers * g)))
        feas = float(max(g.max(), 0.0))
    d = sol.theta_bar - state.theta
    grad_lag = w @ state.g_hat + 2.0 * float(w @ state.zeta) * d
    stationarity = float(np.max(np.abs(sol.theta_bar - domain.clip(sol.theta_bar - grad_lag))))
    return {"complementary_slackness": slack, "primal_feasibility": feas, "stationarity": stationarity}


def _assert_kkt(state: SurrogateState, domain: ParamDomain, sol: SubproblemSolution, tol: float) -> None:
    # stationarity is exact up to rounding because theta(lambda) minimizes the Lagrangian over the box
    res = kkt_residuals(state, domain, sol)
    scale = 1.0 + float(np.max(np.abs(state.values(sol.theta_bar))))
    limits = {"complementary_slackness": 10.0 * tol, "primal_feasibility": tol,
              "stationarity": 10.0 * tol + 1e-12 * scale * (1.0 + float(np.max(np.abs(state.g_hat))))}
    bad = {k: v for k, v in res.items() if v > limits[k]}
    if bad:
        raise AssertionError(f"KKT conditions violated at tol {tol:.1e}: {bad}")
