"""Self-check suites shared by the CLI and the test-suite.

Each suite returns ``(name, passed, detail)`` triples.  The oracles here are
deliberately independent of the code they check: central finite differences
for gradients, a dense grid search with an SLSQP polish for the surrogate
subproblems, and the Bellman equation itself for the chain statistics.
"""

from __future__ import annotations

import itertools

import numpy as np
from scipy.optimize import minimize

from .actor import (FALLBACK, OBJECTIVE, SurrogateState, kkt_residuals, solve_feasibility_subproblem,
                    solve_objective_subproblem)
from .critic import CriticBank, Observation, average_step, default_radius, td_step
from .envs.chain import ChainEnv, ChainMdpConfig, bellman_residual, chain_exact_stats, exact_msbe
from .nn import MlpParams, MlpSpec, backward_params, forward
from .policy import PolicyParams, ParamDomain, grad_log_prob, init_policy, log_prob, sample_action

FD_STEP = 1e-6
KINK_MARGIN = 1e-3


def _rel_err(a, b) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def central_difference(fun, x, h: float = FD_STEP) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    out = np.empty_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        out[k] = (fun(x + e) - fun(x - e)) / (2.0 * h)
    return out


def _away_from_kinks(params: MlpParams, x) -> bool:
    _, cache = forward(params, x)
    return all(np.min(np.abs(z)) > KINK_MARGIN for z in cache.pre)


def random_mlp_instance(rng: np.random.Generator):
    """Random spec, O(1)-scale weights and a unit-ball input away from ReLU kinks."""
    while True:
        spec = MlpSpec(int(rng.integers(2, 5)), int(rng.integers(2, 9)), int(rng.integers(1, 6)),
                       int(rng.integers(1, 4)))
        params = MlpParams.unflatten(spec, rng.normal(0.0, 1.0 / np.sqrt(spec.width), spec.n_params))
        x = rng.normal(size=spec.d_in)
        x /= max(1.0, np.linalg.norm(x))
        if _away_from_kinks(params, x):
            return spec, params, x


def mlp_gradient_errors(n_instances: int = 20, seed: int = 0) -> list[float]:
    rng = np.random.default_rng(seed)
    errs = []
    for _ in range(n_instances):
        spec, params, x = random_mlp_instance(rng)
        u = rng.normal(size=spec.d_out)
        out, cache = forward(params, x)
        analytic = backward_params(cache, params, u)

        def loss(flat):
            return float(u @ forward(MlpParams.unflatten(spec, flat), x)[0])

        errs.append(_rel_err(analytic, central_difference(loss, params.flatten())))
    return errs


def random_policy_instance(rng: np.random.Generator, clamp_active: bool = False):
    while True:
        d_in, d_a = int(rng.integers(1, 5)), int(rng.integers(1, 4))
        m, depth = int(rng.integers(2, 7)), int(rng.integers(2, 4))
        spec = MlpSpec(depth, m, d_in, d_a)
        mean = MlpParams.unflatten(spec, rng.normal(0.0, 1.0 / np.sqrt(m), spec.n_params))
        std = MlpParams.unflatten(spec, rng.normal(0.0, 1.0 / np.sqrt(m), spec.n_params))
        lo, hi = (-0.05, 0.05) if clamp_active else (-5.0, 2.0)
        policy = PolicyParams(mean, std, lo, hi)
        x = rng.normal(size=d_in)
        x /= max(1.0, np.linalg.norm(x))
        raw, _ = forward(std, x)
        if not (_away_from_kinks(mean, x) and _away_from_kinks(std, x)):
            continue
        if np.min(np.minimum(np.abs(raw - lo), np.abs(raw - hi))) < KINK_MARGIN:
            continue
        if clamp_active and not np.any((raw < lo) | (raw > hi)):
            continue
        a = rng.normal(size=d_a)
        return policy, x, a


def policy_gradient_errors(n_instances: int = 20, seed: int = 0, clamp_active: bool = False) -> list[float]:
    rng = np.random.default_rng(seed)
    errs = []
    for _ in range(n_instances):
        policy, x, a = random_policy_instance(rng, clamp_active)
        analytic = grad_log_prob(policy, x, a)
        fd = central_difference(lambda th: float(log_prob(policy.with_theta(th), x, a)), policy.theta)
        errs.append(_rel_err(analytic, fd))
    return errs


def grad_check(n_instances: int = 20, seed: int = 0, tol: float = 1e-5):
    results = []
    for name, errs in (("network parameter gradients", mlp_gradient_errors(n_instances, seed)),
                       ("policy score gradients", policy_gradient_errors(n_instances, seed + 1)),
                       ("policy score gradients, clamp active",
                        policy_gradient_errors(n_instances, seed + 2, clamp_active=True))):
        worst = max(errs)
        results.append((name, worst <= tol, f"{len(errs)} instances, worst relative error {worst:.2e}"))
    return results


# ---------------------------------------------------------------------------
# subproblem oracle


_GRID_POINTS = {1: 4001, 2: 401, 3: 61, 4: 23}


def _polish(state: SurrogateState, domain: ParamDomain, kind: str, start):
    """SLSQP refinement of a grid point; returns (value, theta) or (inf, None) when it fails."""
    n = start.size
    bounds = list(zip(domain.lower, domain.upper))

    def vals(th):
        return state.values(th)

    def jac(th):
        return state.g_hat + 2.0 * state.zeta[:, None] * (th - state.theta)

    if kind == "objective":
        res = minimize(lambda th: vals(th)[0], start, jac=lambda th: jac(th)[0], method="SLSQP", bounds=bounds,
                       constraints=[{"type": "ineq", "fun": lambda th: -vals(th)[1:], "jac": lambda th: -jac(th)[1:]}],
                       options={"ftol": 1e-15, "maxiter": 500})
        th = domain.clip(res.x)
        v = vals(th)
        return (float(v[0]), th) if np.all(v[1:] <= 1e-12) else (np.inf, None)
    x0 = np.concatenate([start, [vals(start)[1:].max()]])
    res = minimize(lambda x: x[-1], x0, jac=lambda x: np.eye(n + 1)[-1], method="SLSQP",
                   bounds=bounds + [(None, None)],
                   constraints=[{"type": "ineq", "fun": lambda x: x[-1] - vals(x[:-1])[1:],
                                 "jac": lambda x: np.hstack([-jac(x[:-1])[1:], np.ones((state.n_constraints, 1))])}],
                   options={"ftol": 1e-15, "maxiter": 500})
    th = domain.clip(res.x[:-1])
    return float(vals(th)[1:].max()), th


def grid_search(state: SurrogateState, domain: ParamDomain, kind: str, points: int | None = None):
    """Dense grid search over the box followed by a local SLSQP polish.

    ``kind`` is ``"objective"`` (min Jbar_0 s.t. Jbar_i <= 0) or
    ``"feasibility"`` (min max_i Jbar_i).  The grid alone is accurate to
    about its spacing; the polish, started from the best grid point, brings
    the value to solver precision.  The smaller of the two values is
    returned, so the polish can only refine the grid answer.
    """
    n = domain.lower.size
    points = points or _GRID_POINTS.get(n, 11)
    axes = [np.linspace(domain.lower[k], domain.upper[k], points) for k in range(n)]
    grid = np.array(list(itertools.product(*axes)))
    d = grid - state.theta
    vals = state.j_hat + d @ state.g_hat.T + np.sum(d * d, axis=1)[:, None] * state.zeta
    if kind == "objective":
        score = np.where(np.all(vals[:, 1:] <= 0.0, axis=1), vals[:, 0], np.inf)
        steer = vals[:, 0] + 1e4 * np.maximum(vals[:, 1:], 0.0).sum(axis=1)
    else:
        score = steer = vals[:, 1:].max(axis=1)
    k = int(np.argmin(score))
    best_val, best_theta = float(score[k]), grid[k]
    val, th = _polish(state, domain, kind, grid[int(np.argmin(steer))])
    if val < best_val:
        best_val, best_theta = val, th
    return best_val, best_theta


def random_subproblem(rng: np.random.Generator, kind: str, max_theta: int = 4, max_constraints: int = 3):
    """Random surrogate instance on a box of half-width 1 around a random center.

    Objective instances have a known interior point with strict margin on
    every constraint; feasibility instances have no feasible point.
    """
    n = int(rng.integers(1, max_theta + 1))
    n_c = int(rng.integers(1, max_constraints + 1))
    center = rng.normal(size=n)
    domain = ParamDomain.around(center, 1.0)
    theta_t = domain.clip(center + rng.uniform(-1.0, 1.0, n))
    g = rng.normal(size=(n_c + 1, n))
    zeta = rng.uniform(0.5, 3.0, n_c + 1)
    j_hat = rng.normal(size=n_c + 1)
    if kind == "objective":
        inner = center + rng.uniform(-0.5, 0.5, n)
        d = inner - theta_t
        j_hat[1:] = -(g[1:] @ d + zeta[1:] * (d @ d)) - rng.uniform(0.2, 1.0, n_c)
    else:
        j_hat[1:] = rng.uniform(0.5, 2.0, n_c) + np.abs(g[1:]).sum(axis=1) * 2.0
    return SurrogateState(j_hat, g, zeta, theta_t), domain


def subproblem_errors(n_instances: int = 100, seed: int = 0):
    """Per-instance (value gap to grid, worst KKT residual) for both subproblem kinds."""
    rng = np.random.default_rng(seed)
    out = {"objective": [], "feasibility": []}
    for kind in out:
        for _ in range(n_instances):
            state, domain = random_subproblem(rng, kind)
            if kind == "objective":
                sol = solve_objective_subproblem(state, domain, tol=1e-10)
                value = float(state.values(sol.theta_bar)[0])
                assert sol.status == OBJECTIVE
            else:
                sol = solve_feasibility_subproblem(state, domain, tol=1e-10)
                value = sol.y_star
                assert sol.status == FALLBACK
            grid_val, _ = grid_search(state, domain, kind)
            kkt = max(kkt_residuals(state, domain, sol).values())
            out[kind].append((abs(value - grid_val), kkt))
    return out


def chain_bellman_residuals(n_instances: int = 20, seed: int = 0) -> list[float]:
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n_instances):
        cfg = ChainMdpConfig.random(4, int(rng.integers(2, 4)), int(rng.integers(1, 3)), seed=seed * 1000 + k)
        table = rng.dirichlet(np.ones(cfg.n_bins), size=cfg.n_states)
        J, Q, _ = chain_exact_stats(cfg, table)
        out.append(float(np.max(np.abs(bellman_residual(cfg, table, J, Q)))))
    return out


def oracle_check(n_instances: int = 20, seed: int = 0, value_tol: float = 1e-4, kkt_tol: float = 1e-6):
    results = []
    for kind, rows in subproblem_errors(n_instances, seed).items():
        gaps, kkts = np.array(rows).T
        ok = gaps.max() <= value_tol and kkts.max() <= kkt_tol
        results.append((f"{kind} subproblem vs grid search", bool(ok),
                        f"{len(rows)} instances, worst value gap {gaps.max():.2e}, worst KKT {kkts.max():.2e}"))
    res = chain_bellman_residuals(n_instances, seed)
    results.append(("chain Bellman residual", max(res) <= 1e-10,
                    f"{len(res)} instances, worst residual {max(res):.2e}"))
    return results


def chain_td_msbe(cfg: ChainMdpConfig, steps: int, seed: int = 0, eta: float = 0.1, gamma_exponent: float = 0.6,
                  depth: int = 2, width: int = 16, record_every: int | None = None):
    """TD(0) on a chain under a fixed random policy with the exact averages injected.

    Returns rows ``(step, raw msbe, averaged msbe)`` per cost index, the MSBE
    taken exactly under the stationary state-action distribution.
    """
    env = ChainEnv(cfg)
    rng = np.random.default_rng(seed)
    pspec = MlpSpec(2, 8, cfg.n_states, 1)
    policy = init_policy(pspec, pspec, rng)
    table = env.policy_table(policy)
    J, _, _ = chain_exact_stats(cfg, table)
    spec = MlpSpec(depth, width, cfg.n_states * cfg.n_bins, 1)
    pairs = CriticBank.create(spec, cfg.costs.shape[0], rng, default_radius(width, depth)).pairs
    record_every = record_every or max(1, steps // 10)
    rows = [[] for _ in pairs]
    s = env.reset(rng)
    for t in range(1, steps + 1):
        a = sample_action(policy, s, rng)
        s_next, c = env.step(s, a, rng)
        a_next = sample_action(policy, s_next, rng)
        obs = Observation(s, a, c, s_next)
        gamma = 1.0 if t == 1 else t ** -gamma_exponent
        for i, pair in enumerate(pairs):
            pairs[i] = average_step(td_step(pair, obs, i, J[i], a_next, eta, env.critic_features), gamma)
        s = s_next
        if t % record_every == 0 or t == steps:
            for i, pair in enumerate(pairs):
                rows[i].append((t, exact_msbe(env, pair.raw, table, J[i], i),
                                exact_msbe(env, pair.averaged, table, J[i], i)))
    return [np.array(r) for r in rows]
