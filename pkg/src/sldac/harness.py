"""Single-loop actor-critic training loop, metrics and multi-seed runs."""

from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .actor import (FALLBACK, OBJECTIVE, ReplayStorage, SolverError, SurrogateState, estimate_gradient,
                    estimate_gradient_mc, estimate_value, mix_theta, recursive_average, solve_surrogate_problem,
                    window_length)
from .critic import CriticBank, Observation, average_step, default_radius, msbe_estimate, td_step
from .envs import CmdpEnv, make_env
from .nn import MlpSpec
from .policy import LOG_STD_MAX, LOG_STD_MIN, ParamDomain, PolicyParams, init_policy, sample_action
from .schedules import PowerLawSchedule, ScheduleSet, validate_region

log = logging.getLogger(__name__)

FROZEN = "frozen"
SHIPPED_CONFIGS = Path(__file__).parent / "configs"


@dataclass
class ExperimentConfig:
    env: str = "lqr"
    env_params: dict = field(default_factory=lambda: {"preset": "reduced"})
    policy_depth: int = 2
    policy_width: int = 32
    critic_depth: int = 3
    critic_width: int = 32
    schedules: ScheduleSet = field(default_factory=lambda: ScheduleSet(
        PowerLawSchedule(1.0, 0.6), PowerLawSchedule(1.0, 0.8),
        PowerLawSchedule(0.1, 0.0), PowerLawSchedule(1.0, 0.27)))
    zeta: list = field(default_factory=lambda: [10.0])
    window_mode: str = "fixed"          # "fixed" or "log"
    window: int = 1000                  # fixed length, or cap for "log"
    window_log_scale: float = 100.0
    a0: float = 10.0                    # critic radius constant
    critic_radius: float | None = None  # overrides the a0-based radius
    batch_size: int = 1                 # B
    inner_iters: int = 1                # q
    iterations: int = 1000
    seeds: list = field(default_factory=lambda: [0])
    solver_tol: float = 1e-8
    solver_max_iters: int = 2000
    half_width: float = 1.0             # policy box half-width around theta_0
    log_std_min: float = LOG_STD_MIN
    log_std_max: float = LOG_STD_MAX
    freeze_policy: bool = False
    gradient: str = "critic"            # "critic" or "mc"
    mc_truncation: int = 20
    msbe_every: int = 10                # 0 disables the MSBE columns
    eval_steps: int = 2000              # rollout length for the initial-policy evaluation
    eval_burn_in: int = 200
    output_dir: str = "runs"

    def __post_init__(self):
        if isinstance(self.schedules, dict):
            self.schedules = ScheduleSet.from_json(self.schedules)
        self.zeta = [float(z) for z in np.atleast_1d(self.zeta)]
        self.seeds = [int(s) for s in np.atleast_1d(self.seeds)]

    def hard_violations(self) -> list[str]:
        out = []
        if not self.batch_size >= self.inner_iters >= 1:
            out.append(f"need B >= q >= 1, got B={self.batch_size}, q={self.inner_iters}")
        elif self.batch_size % self.inner_iters:
            out.append(f"q={self.inner_iters} must divide B={self.batch_size}")
        if self.iterations < 1:
            out.append("iterations must be at least 1")
        if self.policy_depth < 2 or self.critic_depth < 2:
            out.append("network depth must be at least 2")
        if min(self.zeta) <= 0:
            out.append("zeta must be positive")
        if self.half_width <= 0:
            out.append("half_width must be positive")
        if self.window < 1:
            out.append("window must be at least 1")
        if self.window_mode not in ("fixed", "log"):
            out.append(f"unknown window mode {self.window_mode!r}")
        if self.gradient not in ("critic", "mc"):
            out.append(f"unknown gradient mode {self.gradient!r}")
        if self.gradient == "mc" and self.mc_truncation > self.window:
            out.append("mc_truncation exceeds the window")
        if not self.seeds:
            out.append("at least one seed is required")
        return out

    def validate(self) -> None:
        bad = self.hard_violations()
        if bad:
            raise ValueError("; ".join(bad))

    def to_json(self) -> dict:
        d = asdict(self)
        d["schedules"] = self.schedules.to_json()
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        """Load a JSON file, or a shipped config by name (e.g. ``lqr_reduced``)."""
        p = Path(path)
        if not p.exists():
            shipped = SHIPPED_CONFIGS / f"{p.stem}.json"
            if p.parent != Path(".") or not shipped.exists():
                raise FileNotFoundError(f"no config at {path} and no shipped config named {p.stem!r}")
            p = shipped
        return cls.from_json(json.loads(p.read_text()))


@dataclass
class RunState:
    t: int
    env: CmdpEnv
    env_state: np.ndarray
    policy: PolicyParams
    domain: ParamDomain
    critics: CriticBank
    storage: ReplayStorage
    zeta: np.ndarray
    rng: np.random.Generator            # environment and action sampling
    metrics_rng: np.random.Generator    # next actions for the MSBE column only
    j_hat: np.ndarray | None = None
    g_hat: np.ndarray | None = None
    lam: np.ndarray | None = None       # warm start for the dual solver


@dataclass
class MetricsRow:
    t: int
    j_hat: np.ndarray
    j_tilde: np.ndarray
    msbe: np.ndarray
    branch: str
    y_star: float
    step_norm: float
    solver_error: str = ""
    wall_ms: float = 0.0

    @staticmethod
    def header(n_costs: int) -> list[str]:
        idx = range(n_costs)
        return (["t"] + [f"j_hat_{i}" for i in idx] + [f"j_tilde_{i}" for i in idx]
                + [f"msbe_{i}" for i in idx] + ["branch", "y_star", "step_norm", "solver_error"])

    def cells(self) -> list[str]:
        def fmt(x):
            return "" if x is None or not np.isfinite(x) else repr(float(x))
        return ([str(self.t)] + [fmt(x) for x in self.j_hat] + [fmt(x) for x in self.j_tilde]
                + [fmt(x) for x in self.msbe] + [self.branch, fmt(self.y_star), fmt(self.step_norm),
                                                 self.solver_error])


def _spawn(seed: int):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(4)]


def build_env(config: ExperimentConfig) -> CmdpEnv:
    return make_env(config.env, config.env_params)


def init_state(config: ExperimentConfig, seed: int, env: CmdpEnv | None = None) -> RunState:
    """Fresh state: policy and critics drawn from N(0, 1/m^2), critics anchored at their init."""
    config.validate()
    env = env or build_env(config)
    init_rng, rng, metrics_rng, _ = _spawn(seed)
    d_s, d_a, n_costs = env.state_feature_dim, env.action_dim, env.n_costs
    pspec = MlpSpec(config.policy_depth, config.policy_width, d_s, d_a)
    policy = init_policy(pspec, pspec, init_rng, log_std_min=config.log_std_min, log_std_max=config.log_std_max)
    domain = ParamDomain.around(policy.theta, config.half_width)
    cspec = MlpSpec(config.critic_depth, config.critic_width, env.critic_feature_dim, 1)
    radius = config.critic_radius if config.critic_radius is not None else \
        default_radius(config.critic_width, config.critic_depth, config.a0)
    critics = CriticBank.create(cspec, n_costs, init_rng, radius)
    zeta = np.broadcast_to(np.asarray(config.zeta, dtype=np.float64), (n_costs,)).copy()
    return RunState(0, env, env.reset(rng), policy, domain, critics, ReplayStorage(config.window), zeta, rng,
                    metrics_rng)


def _sample_transitions(state: RunState, n: int) -> list[Observation]:
    env, out = state.env, []
    s = state.env_state
    for _ in range(n):
        a = sample_action(state.policy, env.state_features(s), state.rng)
        s_next, costs = env.step(s, a, state.rng)
        out.append(Observation(s, a, costs, s_next))
        s = s_next
    state.env_state = s
    return out


def _msbe_column(state: RunState, config: ExperimentConfig) -> np.ndarray:
    n = state.env.n_costs
    if not config.msbe_every or state.t % config.msbe_every:
        return np.full(n, np.nan)
    out = np.empty(n)
    env = state.env
    for i, pair in enumerate(state.critics.pairs):
        exact = env.exact_msbe(pair.averaged, state.policy, state.j_hat[i], i)
        if exact is not None:
            out[i] = exact
            continue
        batch = state.storage.observations()
        S2 = np.stack([o.s_next for o in batch])
        a_next = sample_action(state.policy, env.state_features(S2), state.metrics_rng)
        out[i] = msbe_estimate(pair, batch, i, state.j_hat[i], a_next, env.critic_features, use_raw=False)
    return out


def run_iteration(state: RunState, config: ExperimentConfig) -> tuple[RunState, MetricsRow]:
    """One outer iteration: sample, value estimates, critic steps, gradient estimates, actor step."""
    started = time.perf_counter()
    t, env, sch = state.t, state.env, config.schedules
    first = t == 0
    alpha = 1.0 if first else sch.alpha.value_at(t + 1)
    gamma = 1.0 if first else sch.gamma.value_at(t + 1)
    eta = sch.eta.value_at(t + 1)

    # new observations under the current policy
    batch = _sample_transitions(state, config.batch_size)
    state.storage.extend(batch)

    # value estimates; the critic step uses the previous running estimate
    length = min(len(state.storage),
                 window_length(t, config.window_mode, config.window, config.window, config.window_log_scale))
    j_tilde = np.array([estimate_value(state.storage, i, length) for i in range(env.n_costs)])
    j_prev = j_tilde.copy() if state.j_hat is None else state.j_hat
    state.j_hat = recursive_average(j_prev, j_tilde, alpha)

    # q critic inner iterations over B/q observations each, then averaging
    S2 = np.stack([o.s_next for o in batch])
    a_next = np.atleast_2d(sample_action(state.policy, env.state_features(S2), state.rng))
    chunk = config.batch_size // config.inner_iters
    pairs = []
    for i, pair in enumerate(state.critics.pairs):
        for k in range(config.inner_iters):
            sl = slice(k * chunk, (k + 1) * chunk)
            pair = td_step(pair, batch[sl], i, j_prev[i], a_next[sl], eta, env.critic_features)
        pairs.append(average_step(pair, gamma))
    state.critics = CriticBank(pairs)

    # gradient estimates (not needed while the policy is frozen)
    if config.freeze_policy:
        pass
    elif config.gradient == "critic":
        g_tilde = np.stack([estimate_gradient(state.storage, i, pair, state.policy, env.state_features,
                                              env.critic_features, length)
                            for i, pair in enumerate(state.critics.pairs)])
    else:
        usable = min(length, len(state.storage))
        if usable >= config.mc_truncation:
            g_tilde = np.stack([estimate_gradient_mc(state.storage, i, state.policy, config.mc_truncation,
                                                     env.state_features, length) for i in range(env.n_costs)])
        else:
            g_tilde = np.zeros((env.n_costs, state.policy.n_theta))
    if not config.freeze_policy:
        state.g_hat = g_tilde if state.g_hat is None else recursive_average(state.g_hat, g_tilde, alpha)

    msbe = _msbe_column(state, config)

    # actor step
    theta_t = state.policy.theta
    branch, y_star, step_norm, err = FROZEN, float("nan"), 0.0, ""
    if not config.freeze_policy:
        surrogate = SurrogateState(state.j_hat, state.g_hat, state.zeta, theta_t)
        try:
            # tolerance relative to the cost scale
            tol = config.solver_tol * max(1.0, float(np.max(np.abs(state.j_hat))))
            sol = solve_surrogate_problem(surrogate, state.domain, tol, config.solver_max_iters, state.lam)
        except SolverError as exc:
            sol, err = exc.best, str(exc)
            log.warning("t=%d: %s", t, exc)
        branch = sol.status
        if branch == FALLBACK:
            y_star = sol.y_star
        elif branch == OBJECTIVE:
            state.lam = sol.multipliers
        beta = sch.beta.value_at(t + 1)
        theta_next = mix_theta(theta_t, sol.theta_bar, beta)
        step_norm = float(np.linalg.norm(theta_next - theta_t))
        state.policy = state.policy.with_theta(theta_next)

    row = MetricsRow(t, state.j_hat.copy(), j_tilde, msbe, branch, y_star, step_norm, err,
                     1e3 * (time.perf_counter() - started))
    state.t = t + 1
    return state, row


def evaluate_policy(env: CmdpEnv, policy: PolicyParams, steps: int, burn_in: int, rng) -> np.ndarray:
    """Average shifted costs of one rollout after a burn-in."""
    s = env.reset(rng)
    total = np.zeros(env.n_costs)
    for k in range(burn_in + steps):
        a = sample_action(policy, env.state_features(s), rng)
        s, c = env.step(s, a, rng)
        if k >= burn_in:
            total += c
    return total / steps


def _final_window(rows_j: np.ndarray) -> np.ndarray:
    n = len(rows_j)
    return rows_j[n - max(1, n // 10):]


def summarize_seed(config: ExperimentConfig, seed: int, j_hat: np.ndarray, j_tilde: np.ndarray,
                   branches: list[str], initial: np.ndarray, exact_final: np.ndarray | None,
                   slack: float = 0.05) -> dict:
    tail_tilde = _final_window(j_tilde)
    satisfied = np.all(tail_tilde[:, 1:] <= slack, axis=1) if j_tilde.shape[1] > 1 else np.ones(len(tail_tilde), bool)
    out = {
        "seed": seed,
        "iterations": len(j_hat),
        "final_j_hat": j_hat[-1].tolist(),
        "final_window_objective": float(tail_tilde[:, 0].mean()),
        "final_window_constraints": tail_tilde[:, 1:].mean(axis=0).tolist(),
        "constraint_satisfaction_fraction": float(satisfied.mean()),
        "initial_policy_costs": initial.tolist(),
        "fallback_iterations": int(sum(b == FALLBACK for b in branches)),
    }
    if exact_final is not None:
        out["exact_final_j"] = exact_final.tolist()
        out["final_j_hat_abs_error"] = np.abs(j_hat[-1] - exact_final).tolist()
    return out


def run_seed(config: ExperimentConfig, seed: int, out_dir=None, flush_every: int = 100) -> dict:
    """Train one seed; writes ``seed{n}.csv`` (and a timing file) when ``out_dir`` is given."""
    env = build_env(config)
    state = init_state(config, seed, env)
    eval_rng = _spawn(seed)[3]
    initial = evaluate_policy(env, state.policy, config.eval_steps, config.eval_burn_in, eval_rng)
    writer = timing = None
    files = []
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        f = open(out / f"seed{seed}.csv", "w", newline="")
        g = open(out / f"seed{seed}_timing.csv", "w", newline="")
        files = [f, g]
        writer, timing = csv.writer(f, lineterminator="\n"), csv.writer(g, lineterminator="\n")
        writer.writerow(MetricsRow.header(env.n_costs))
        timing.writerow(["t", "wall_ms"])
    j_hat, j_tilde, branches = [], [], []
    try:
        for _ in range(config.iterations):
            state, row = run_iteration(state, config)
            j_hat.append(row.j_hat)
            j_tilde.append(row.j_tilde)
            branches.append(row.branch)
            if writer is not None:
                writer.writerow(row.cells())
                timing.writerow([row.t, f"{row.wall_ms:.3f}"])
                if (row.t + 1) % flush_every == 0:
                    for fh in files:
                        fh.flush()
    finally:
        for fh in files:
            fh.close()
    exact = env.exact_values(state.policy)
    return summarize_seed(config, seed, np.array(j_hat), np.array(j_tilde), branches, initial, exact)


def _run_seed_job(args):
    cfg_json, seed, out_dir = args
    return run_seed(ExperimentConfig.from_json(cfg_json), seed, out_dir)


def run_experiment(config: ExperimentConfig, out_dir=None, seeds=None, workers: int = 1) -> dict:
    """Run every seed, write per-seed CSVs and ``summary.json``; returns the summary."""
    config.validate()
    validate_region(config.schedules.kappas)
    seeds = list(seeds) if seeds is not None else config.seeds
    out = Path(out_dir if out_dir is not None else config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(config.to_json(), indent=2))
    jobs = [(config.to_json(), s, str(out)) for s in seeds]
    if workers > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            per_seed = list(pool.map(_run_seed_job, jobs))
    else:
        per_seed = [_run_seed_job(j) for j in jobs]
    summary = {
        "per_seed": per_seed,
        "mean": {
            "final_j_hat": np.mean([r["final_j_hat"] for r in per_seed], axis=0).tolist(),
            "final_window_objective": float(np.mean([r["final_window_objective"] for r in per_seed])),
            "constraint_satisfaction_fraction":
                float(np.mean([r["constraint_satisfaction_fraction"] for r in per_seed])),
        },
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary


def read_metrics(path) -> dict[str, np.ndarray]:
    """Load a metrics CSV into numeric columns (branch kept as strings)."""
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    cols = {}
    for key in rows[0] if rows else []:
        vals = [r[key] for r in rows]
        if key in ("branch", "solver_error"):
            cols[key] = np.array(vals)
        else:
            cols[key] = np.array([float(v) if v else np.nan for v in vals])
    return cols
