from math import comb

import numpy as np
import pytest

from mfteams import (
    DiscountedHorizon,
    FiniteHorizon,
    LiftedPolicy,
    PolicyKernel,
    SimConfig,
    build_measure_mdp,
    chaos_gap,
    enumerate_empirical,
    epsilon_gap,
    evaluate_symmetric_policy_exact,
    multinomial_pmf_table,
    simulate_n_agents,
    solve_symmetric_restricted,
    value_iteration_finite,
    verify_markov_mf,
)
from mfteams.measures import policy_grid, simplex_grid
from mfteams.sim import _worker_count


def uniform_kernel(num_states=2, num_actions=2):
    return PolicyKernel.constant(
        np.full((num_states, num_actions), 1.0 / num_actions),
        simplex_grid(2, num_states),
    )


def point_mass_kernel(action=0, num_states=2, num_actions=2):
    rows = np.zeros((num_states, num_actions))
    rows[:, action] = 1.0
    return PolicyKernel.constant(rows, simplex_grid(1, num_states))


# ---- simulate ----


def test_sim_config_validation(counterexample):
    with pytest.raises(ValueError):
        SimConfig(population=0, horizon=FiniteHorizon(1), policy=None,
                  replications=1, seed=0)
    with pytest.raises(ValueError):
        SimConfig(population=1, horizon=FiniteHorizon(1), policy=None,
                  replications=0, seed=0)


def test_uniform_kernel_simulation_matches_exact(counterexample):
    config = SimConfig(population=2, horizon=FiniteHorizon(2),
                       policy=uniform_kernel(), replications=20_000, seed=7)
    report = simulate_n_agents(counterexample, config)
    # exact cost of the shared uniform kernel from delta_1 is 0.75
    assert abs(report.mean_cost - 0.75) <= 3.0 * report.std_error
    assert report.steps == 2
    assert report.truncation_bound == 0.0
    assert report.chaos_series is not None


def test_lifted_optimal_rollout_is_deterministic(counterexample):
    mdp = build_measure_mdp(counterexample, 2)
    _, policy = value_iteration_finite(mdp, 2)
    config = SimConfig(population=2, horizon=FiniteHorizon(2),
                       policy=LiftedPolicy(mdp, policy), replications=50, seed=3)
    report = simulate_n_agents(counterexample, config)
    # from (0,2) the optimal play pays 0.5 then splits; every path is identical
    assert report.mean_cost == 0.5
    assert report.std_error == 0.0
    assert report.chaos_series is None


def test_restricted_solution_rollout(counterexample):
    sol = solve_symmetric_restricted(
        counterexample, 2, FiniteHorizon(2), policy_grid(2, 2, 2)
    )
    config = SimConfig(population=2, horizon=FiniteHorizon(2), policy=sol,
                       replications=4000, seed=11)
    report = simulate_n_agents(counterexample, config)
    assert abs(report.mean_cost - 0.75) <= 3.0 * report.std_error


def test_discounted_truncation_and_exact_value(decoupled):
    pi = point_mass_kernel(0)
    config = SimConfig(population=2, horizon=DiscountedHorizon(), policy=pi,
                       replications=800, seed=17, truncation_error=1e-4)
    report = simulate_n_agents(decoupled, config)
    assert report.truncation_bound <= 1e-4
    assert report.steps > 10
    # per-agent values under always-action-0 are V = (0.9, 1.9), so the
    # population-average cost from the i.i.d. start is exactly 1.4
    values = evaluate_symmetric_policy_exact(decoupled, 2, pi, DiscountedHorizon())
    index = {s.counts: i for i, s in enumerate(enumerate_empirical(2, 2))}
    start = multinomial_pmf_table(decoupled.initial_dist, 2)
    exact = sum(p * values[index[c]] for c, p in start.items())
    assert exact == pytest.approx(1.4, abs=1e-12)
    assert abs(report.mean_cost - exact) <= 3.0 * report.std_error + report.truncation_bound


def test_worker_count_and_equivalence(counterexample, monkeypatch):
    config = SimConfig(population=4, horizon=FiniteHorizon(3),
                       policy=uniform_kernel(), replications=200, seed=23)
    serial = simulate_n_agents(counterexample, config, workers=1)
    threaded = simulate_n_agents(counterexample, config, workers=4)
    assert serial.mean_cost == threaded.mean_cost
    assert serial.std_error == threaded.std_error
    np.testing.assert_array_equal(serial.mean_measures, threaded.mean_measures)
    monkeypatch.setenv("MFTEAMS_WORKERS", "3")
    assert _worker_count() == 3
    monkeypatch.setenv("MFTEAMS_WORKERS", "not-a-number")
    assert _worker_count() == 1


def test_stage_kernel_list_rollout(counterexample):
    split = PolicyKernel.constant(
        np.array([[1.0, 0.0], [0.5, 0.5]]), simplex_grid(2, 2)
    )
    config = SimConfig(population=2, horizon=FiniteHorizon(2),
                       policy=[split, uniform_kernel()], replications=100, seed=29)
    report = simulate_n_agents(counterexample, config)
    assert report.chaos_series is not None
    with pytest.raises(ValueError):
        simulate_n_agents(
            counterexample,
            SimConfig(population=2, horizon=FiniteHorizon(3),
                      policy=[split, split], replications=10, seed=1),
        )


def test_report_round_trips_to_dict(counterexample):
    config = SimConfig(population=2, horizon=FiniteHorizon(2),
                       policy=uniform_kernel(), replications=5, seed=1)
    payload = simulate_n_agents(counterexample, config).to_dict()
    assert payload["population"] == 2
    assert payload["replications"] == 5
    assert len(payload["mean_measures"]) == 3
    assert len(payload["chaos_series"]) == 3


# ---- propagation of chaos ----


def test_chaos_gap_decreases_with_population(counterexample):
    rows = chaos_gap(counterexample, [2, 8, 32], uniform_kernel(),
                     steps=3, replications=600, seed=99)
    gaps = [r.mean_max_gap for r in rows]
    assert gaps[0] > gaps[1] > gaps[2] > 0.0
    # at t=1 the measure is Bin(N, 1/2)/N, so the L1 gap has a closed form
    for row in rows:
        n = row.population
        exact = 2.0 * sum(
            comb(n, k) * 0.5**n * abs(k / n - 0.5) for k in range(n + 1)
        )
        assert abs(row.per_step_mean[1] - exact) <= 3.0 * row.per_step_se[1]


def test_chaos_gap_zero_for_deterministic_dynamics(counterexample):
    # all agents start in state 1 and jump to state 0 together; the
    # empirical measure never leaves the flow
    rows = chaos_gap(counterexample, [2, 5], point_mass_kernel(0),
                     steps=3, replications=50, seed=1)
    assert [r.mean_max_gap for r in rows] == [0.0, 0.0]


def test_chaos_gap_needs_shared_kernels(counterexample):
    mdp = build_measure_mdp(counterexample, 2)
    _, policy = value_iteration_finite(mdp, 2)
    with pytest.raises(TypeError):
        chaos_gap(counterexample, [2], LiftedPolicy(mdp, policy),
                  steps=2, replications=10, seed=0)


def test_chaos_gap_single_replication_has_no_se(counterexample):
    rows = chaos_gap(counterexample, [2], uniform_kernel(),
                     steps=2, replications=1, seed=4)
    assert rows[0].std_error is None
    assert rows[0].per_step_se is None


# ---- Markov summary check ----


def test_markov_summary_holds_for_shared_kernel(counterexample, weakly_coupled):
    rng = np.random.default_rng(71)
    for model in (counterexample, weakly_coupled):
        grid = simplex_grid(2, 2)
        table = rng.dirichlet(np.ones(2), size=(len(grid), 2))
        report = verify_markov_mf(model, 2, PolicyKernel(grid, table), t_max=2)
        assert report.max_deviation <= 1e-12
        assert len(report.per_step) == 2


def test_markov_summary_breaks_for_agent_indexed_kernels(weakly_coupled):
    grid = simplex_grid(1, 2)
    follow = PolicyKernel.constant(np.eye(2), grid)
    oppose = PolicyKernel.constant(np.eye(2)[::-1].copy(), grid)
    uniform = PolicyKernel.constant(np.full((2, 2), 0.5), grid)
    report = verify_markov_mf(weakly_coupled, 3, [follow, oppose, uniform], t_max=2)
    assert report.max_deviation > 0.01


def test_markov_check_input_guards(counterexample):
    with pytest.raises(ValueError):
        verify_markov_mf(counterexample, 5, uniform_kernel())
    with pytest.raises(ValueError):
        verify_markov_mf(counterexample, 3, [uniform_kernel()] * 2)


# ---- optimality gap ----


def test_epsilon_gap_reproduces_counterexample(counterexample):
    rows = epsilon_gap(counterexample, [2], FiniteHorizon(2), mesh=2, policy_mesh=2)
    row = rows[0]
    assert row.status == "ok"
    assert row.optimal_value == pytest.approx(0.5, abs=1e-9)
    assert row.policy_value == pytest.approx(0.75, abs=1e-9)
    assert row.gap == pytest.approx(0.25, abs=1e-9)


def test_epsilon_gap_zero_when_decoupled(decoupled):
    # the solve accuracy bounds the measured gap, so keep it below the target
    rows = epsilon_gap(decoupled, [2, 3], DiscountedHorizon(epsilon=1e-12),
                       mesh=8, policy_mesh=8)
    for row in rows:
        assert row.status == "ok"
        assert abs(row.gap) <= 1e-9


def test_epsilon_gap_reports_capped_populations(counterexample):
    rows = epsilon_gap(counterexample, [2, 40], FiniteHorizon(2),
                       mesh=2, policy_mesh=2, cap=100)
    assert rows[0].status == "ok"
    assert rows[1].status.startswith("skipped")
    assert rows[1].gap is None
