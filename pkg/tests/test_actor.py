import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sldac.actor import (FALLBACK, OBJECTIVE, InfeasibleSubproblem, ReplayStorage, SolverError, SurrogateState,
                         estimate_gradient, estimate_gradient_mc, estimate_value, kkt_residuals, mix_theta,
                         recursive_average, solve_feasibility_subproblem, solve_objective_subproblem,
                         solve_surrogate_problem, surrogate_eval, window_length)
from sldac.checks import grid_search, random_subproblem
from sldac.critic import CriticPair, Observation
from sldac.envs.chain import ChainEnv, ChainMdpConfig, exact_policy_gradient
from sldac.nn import MlpParams, MlpSpec, init_params
from sldac.policy import ParamDomain, PolicyParams, grad_log_prob, init_policy, sample_action


def storage_of(costs, s=None):
    st_ = ReplayStorage(max(len(costs), 1))
    for k, c in enumerate(costs):
        x = [0.0] if s is None else s[k]
        st_.push(Observation(x, [0.0], np.atleast_1d(c), x))
    return st_


def test_estimate_value_examples():
    assert estimate_value(storage_of([1.0, 2.0, 3.0]), 0) == 2.0
    assert estimate_value(storage_of([0.3] * 7), 0) == pytest.approx(0.3)
    assert estimate_value(storage_of([1.0, 2.0, 9.0]), 0, length=1) == 9.0
    with pytest.raises(ValueError):
        estimate_value(ReplayStorage(3), 0)


def test_storage_ring_order_and_limits(tmp_path):
    st_ = ReplayStorage(3)
    for c in range(5):
        st_.push(Observation([c], [0.0], [float(c)], [c + 1.0]))
    assert len(st_) == 3
    assert st_.window()[2][:, 0].tolist() == [2.0, 3.0, 4.0]
    assert st_.window(2)[0][:, 0].tolist() == [3.0, 4.0]
    with pytest.raises(ValueError):
        st_.window(4)
    st_.dump(tmp_path / "obs.jsonl")
    again = ReplayStorage.load(tmp_path / "obs.jsonl")
    assert [o.to_json() for o in again.observations()] == [o.to_json() for o in st_.observations()]


def test_window_length_modes():
    assert window_length(0, "fixed", 500) == 500
    assert window_length(0, "log", max_length=1000, log_scale=100) == int(np.ceil(100 * np.log(2)))
    assert window_length(10 ** 9, "log", max_length=1000, log_scale=100) == 1000
    with pytest.raises(ValueError):
        window_length(0, "other")


def scalar_setup(q_out=2.0):
    """Scalar-action policy on a 1-d state and a critic whose output is q_out on every pair."""
    pspec = MlpSpec(2, 2, 1, 1)
    policy = PolicyParams(MlpParams(pspec, [np.array([[1.0], [0.5]]), np.array([[0.3, -0.2]])]),
                          MlpParams(pspec, [np.array([[0.4], [-0.1]]), np.array([[0.2, 0.1]])]))
    cspec = MlpSpec(2, 1, 1, 1)
    critic_net = MlpParams(cspec, [np.array([[1.0]]), np.array([[q_out]])])
    pair = CriticPair(critic_net, critic_net, critic_net, 1.0)
    return policy, pair, (lambda S: np.asarray(S, float)), (lambda S, A: np.ones((len(S), 1)))


def test_estimate_gradient_single_and_pair():
    policy, pair, phi_s, phi_sa = scalar_setup()
    st_ = ReplayStorage(2)
    st_.push(Observation([0.5], [0.7], [1.0], [0.2]))
    g = estimate_gradient(st_, 0, pair, policy, phi_s, phi_sa)
    assert np.allclose(g, 2.0 * grad_log_prob(policy, [0.5], [0.7]), rtol=1e-13, atol=1e-15)
    st_.push(Observation([0.9], [-0.4], [1.0], [0.1]))
    g = estimate_gradient(st_, 0, pair, policy, phi_s, phi_sa)
    expect = 0.5 * (2.0 * grad_log_prob(policy, [0.5], [0.7]) + 2.0 * grad_log_prob(policy, [0.9], [-0.4]))
    assert np.allclose(g, expect, rtol=1e-13, atol=1e-15)
    _, zero_pair, _, _ = scalar_setup(q_out=0.0)
    assert not np.any(estimate_gradient(st_, 0, zero_pair, policy, phi_s, phi_sa))


def test_recursive_average_examples():
    assert recursive_average(5.0, 3.0, 1.0) == 3.0
    assert recursive_average(0.0, 4.0, 0.25) == 1.0
    x = 0.0
    for t in range(1, 100_001):
        x = recursive_average(x, 7.0, t ** -0.6)
    assert abs(x - 7.0) < 1e-4
    with pytest.raises(ValueError):
        recursive_average(0.0, 1.0, 0.0)


def test_surrogate_eval_examples(rng):
    state = SurrogateState([0.5, -1.0], np.zeros((2, 2)), [1.0, 1.0], [1.0, 1.0])
    assert surrogate_eval(state, 1, [1.0, 1.0]) == -1.0
    assert surrogate_eval(state, 0, [1.0, 3.0]) == pytest.approx(4.5)
    for _ in range(10):
        n = int(rng.integers(1, 6))
        j, g, z, th0, th = rng.normal(size=3), rng.normal(size=(3, n)), rng.uniform(0.1, 2, 3), \
            rng.normal(size=n), rng.normal(size=n)
        state = SurrogateState(j, g, z, th0)
        for i in range(3):
            d = th - th0
            expect = j[i] + sum(g[i, k] * d[k] for k in range(n)) + z[i] * sum(dk * dk for dk in d)
            assert surrogate_eval(state, i, th) == pytest.approx(expect, abs=1e-12)
            assert state.values(th)[i] == pytest.approx(expect, abs=1e-12)


def test_objective_unconstrained_and_boxed():
    state = SurrogateState([0.0], [[2.0, 0.0]], [1.0], [0.0, 0.0])
    sol = solve_objective_subproblem(state, ParamDomain.around([0.0, 0.0], 1e6))
    assert np.allclose(sol.theta_bar, [-1.0, 0.0])
    sol = solve_objective_subproblem(state, ParamDomain.around([0.0, 0.0], 0.5))
    assert np.allclose(sol.theta_bar, [-0.5, 0.0])
    assert sol.status == OBJECTIVE


def test_objective_with_active_constraint():
    # min theta^2 + 2 theta  s.t.  0.5 - theta + theta^2 * 0.1 <= 0 ... constraint pushes theta right
    state = SurrogateState([0.0, 0.5], [[2.0], [-1.0]], [1.0, 0.1], [0.0])
    dom = ParamDomain.around([0.0], 10.0)
    sol = solve_objective_subproblem(state, dom, tol=1e-12)
    root = (1.0 - np.sqrt(1.0 - 4 * 0.1 * 0.5)) / (2 * 0.1)
    assert sol.theta_bar[0] == pytest.approx(root, abs=1e-8)
    assert sol.multipliers[0] > 0
    assert max(kkt_residuals(state, dom, sol).values()) < 1e-8


def test_objective_matches_grid_oracle():
    rng = np.random.default_rng(11)
    for _ in range(10):
        state, dom = random_subproblem(rng, "objective")
        sol = solve_objective_subproblem(state, dom, tol=1e-10)
        grid_val, _ = grid_search(state, dom, "objective")
        assert abs(state.values(sol.theta_bar)[0] - grid_val) <= 1e-4
        assert max(kkt_residuals(state, dom, sol).values()) <= 1e-6


def test_feasibility_examples():
    state = SurrogateState([0.0, 1.0], [[1.0, 1.0], [0.0, 0.0]], [1.0, 1.0], [0.3, -0.2])
    sol = solve_feasibility_subproblem(state, ParamDomain.around([0.0, 0.0], 2.0))
    assert np.allclose(sol.theta_bar, [0.3, -0.2]) and sol.y_star == pytest.approx(1.0)
    g = np.array([0.7, -0.4])
    mirrored = SurrogateState([0.0, 0.5, 0.5], np.stack([g, g, -g]), [1.0, 2.0, 2.0], [1.0, 1.0])
    sol = solve_feasibility_subproblem(mirrored, ParamDomain.around([1.0, 1.0], 3.0), tol=1e-12)
    assert np.allclose(sol.theta_bar, [1.0, 1.0], atol=1e-8)
    assert sol.status == FALLBACK


def test_feasibility_matches_grid_oracle():
    rng = np.random.default_rng(12)
    for _ in range(10):
        state, dom = random_subproblem(rng, "feasibility")
        sol = solve_feasibility_subproblem(state, dom, tol=1e-10)
        grid_val, _ = grid_search(state, dom, "feasibility")
        assert abs(sol.y_star - grid_val) <= 1e-4


def test_infeasible_problem_falls_back():
    state = SurrogateState([0.0, 1.0], [[1.0], [0.0]], [1.0, 1.0], [0.0])
    dom = ParamDomain.around([0.0], 0.1)
    with pytest.raises(InfeasibleSubproblem) as info:
        solve_objective_subproblem(state, dom)
    assert info.value.fallback.y_star == pytest.approx(1.0)
    sol = solve_surrogate_problem(state, dom)
    assert sol.status == FALLBACK and sol.y_star > 0


def test_solver_error_carries_best_iterate():
    state = SurrogateState([0.0, 0.5], [[2.0], [-1.0]], [1.0, 0.1], [0.0])
    dom = ParamDomain.around([0.0], 10.0)
    with pytest.raises(SolverError) as info:
        solve_objective_subproblem(state, dom, tol=0.0, max_iters=2, precheck=False)
    assert dom.contains(info.value.best.theta_bar)
    assert info.value.best.iterations == 2


def test_mix_theta_examples():
    assert np.array_equal(mix_theta([0.0, 0.0], [1.0, 1.0], 1.0), [1.0, 1.0])
    assert np.array_equal(mix_theta([0.0, 0.0], [1.0, 1.0], 0.5), [0.5, 0.5])
    assert np.allclose(mix_theta([0.2, 0.3], [1.0, 1.0], 1e-300), [0.2, 0.3])
    with pytest.raises(ValueError):
        mix_theta([0.0], [1.0], 0.0)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2 ** 31), beta=st.floats(1e-6, 1.0))
def test_mix_theta_stays_in_box(seed, beta):
    rng = np.random.default_rng(seed)
    dom = ParamDomain.around(rng.normal(size=4), 1.0)
    a, b = dom.clip(rng.normal(size=4) * 2), dom.clip(rng.normal(size=4) * 2)
    assert dom.contains(mix_theta(a, b, beta), atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 31))
def test_subproblem_solutions_inside_box(seed):
    rng = np.random.default_rng(seed)
    state, dom = random_subproblem(rng, "objective")
    sol = solve_surrogate_problem(state, dom, tol=1e-10)
    assert dom.contains(sol.theta_bar)
    assert np.all(state.values(sol.theta_bar)[1:] <= 1e-8)


def test_fallback_y_star_monotone_on_majorized_constraint():
    """Re-anchored quadratic majorizers of a smooth infeasible constraint: y* never increases."""
    def j1(th):
        return 1.0 + 0.5 * np.sum(np.cos(th)) + 0.1 * np.sum(th * th)

    def g1(th):
        return -0.5 * np.sin(th) + 0.2 * th

    zeta = 0.5 * (0.5 + 0.2)          # half the gradient Lipschitz constant
    theta = np.array([0.3, -0.4, 0.2])
    dom = ParamDomain.around(np.zeros(3), 3.0)
    ys = []
    for _ in range(40):
        state = SurrogateState([0.0, j1(theta)], np.stack([np.zeros(3), g1(theta)]), [1.0, zeta], theta)
        sol = solve_surrogate_problem(state, dom, tol=1e-12)
        assert sol.status == FALLBACK
        ys.append(sol.y_star)
        theta = mix_theta(theta, sol.theta_bar, 1.0)
    assert np.all(np.diff(ys) <= 1e-10)
    assert ys[-1] < ys[0]


def test_mc_gradient_trivial_cases():
    policy, _, phi_s, _ = scalar_setup()
    const = storage_of([0.25] * 10, s=[[0.1 * k] for k in range(10)])
    assert not np.any(estimate_gradient_mc(const, 0, policy, 3, phi_s))
    costs = [1.0, 3.0, 2.0, 6.0]
    st_ = ReplayStorage(4)
    S, A = [[0.1], [0.4], [0.7], [0.2]], [[0.5], [-0.3], [0.1], [0.9]]
    for s, a, c in zip(S, A, costs):
        st_.push(Observation(s, a, [c], s))
    expect = sum((c - 3.0) * grad_log_prob(policy, s, a) for s, a, c in zip(S, A, costs)) / 4
    assert np.allclose(estimate_gradient_mc(st_, 0, policy, 1, phi_s), expect, rtol=1e-12, atol=1e-14)
    with pytest.raises(ValueError):
        estimate_gradient_mc(st_, 0, policy, 5, phi_s)


def test_mc_gradient_matches_exact_on_two_state_chain():
    cfg = ChainMdpConfig.symmetric_two_state(stay=0.6)
    env = ChainEnv(cfg)
    rng = np.random.default_rng(4)
    spec = MlpSpec(2, 3, 2, 1)
    policy = PolicyParams(MlpParams.unflatten(spec, rng.normal(size=spec.n_params) * 0.6),
                          MlpParams.unflatten(spec, rng.normal(size=spec.n_params) * 0.3))
    exact = exact_policy_gradient(cfg, policy, np.eye(2), 0)
    runs, n = 30, 4000
    estimates = []
    for _ in range(runs):
        st_ = ReplayStorage(n)
        s = env.reset(rng)
        for _ in range(200 + n):
            a = sample_action(policy, s, rng)
            s2, c = env.step(s, a, rng)
            st_.push(Observation(s, a, c, s2))
            s = s2
        estimates.append(estimate_gradient_mc(st_, 0, policy, 15, env.state_features))
    est = np.array(estimates)
    se = est.std(axis=0, ddof=1) / np.sqrt(runs)
    assert np.all(np.abs(est.mean(axis=0) - exact) <= 3.0 * se + 1e-12)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2 ** 31))
def test_surrogate_strong_convexity(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 6))
    state = SurrogateState(rng.normal(size=3), rng.normal(size=(3, n)), rng.uniform(0.1, 5.0, 3), rng.normal(size=n))
    a, b = rng.normal(size=n) * 2, rng.normal(size=n) * 2
    mid = state.values(0.5 * (a + b))
    bound = 0.5 * state.values(a) + 0.5 * state.values(b) - 0.25 * state.zeta * np.sum((a - b) ** 2)
    assert np.all(mid <= bound + 1e-10 * (1 + np.abs(bound)))


def test_kkt_assertion_is_active():
    import sldac.actor as actor
    assert actor.CHECK_KKT
