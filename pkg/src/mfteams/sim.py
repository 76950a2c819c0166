"""Finite-population rollouts and diagnostics.

Covers Monte Carlo simulation under lifted or shared-kernel policies,
propagation-of-chaos gap estimation against the deterministic limit flow,
an exact small-population check that (own state, own action, empirical
measure) is a controlled Markov summary under shared kernels, and the
exact optimality-gap table for limit-derived policies.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from itertools import product

import numpy as np

from .lifted import (
    MeasurePolicy,
    PolicyKernel,
    SymmetricSolution,
    _resolve_beta,
    build_measure_mdp,
    evaluate_symmetric_policy_exact,
    realize_exchangeable_action,
    value_iteration_discounted,
    value_iteration_finite,
)
from .measures import (
    DEFAULT_ENUMERATION_CAP,
    EnumerationCapError,
    round_to_counts,
)
from .mkv import (
    build_mkv_mdp,
    extract_mf_policy,
    extract_stage_policies,
    flow_trajectory,
    solve_mkv_discounted,
    solve_mkv_finite,
)
from .model import DiscountedHorizon, FiniteHorizon

WORKERS_ENV = "MFTEAMS_WORKERS"


def _worker_count(workers=None):
    if workers is not None:
        return max(1, int(workers))
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _map_indexed(fn, count, workers):
    """Evaluate fn(0..count-1) into a list; results are slot-indexed so the
    outcome is identical at any worker count."""
    results = [None] * count
    if workers <= 1:
        for r in range(count):
            results[r] = fn(r)
        return results
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for r, value in zip(range(count), pool.map(fn, range(count))):
            results[r] = value
    return results


def _replication_rng(seed, *key):
    # Per-replication stream derived by hashing the base seed with the index.
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**63 - 1), *key]))


@dataclass(frozen=True)
class LiftedPolicy:
    """A solved lifted policy together with the MDP that indexes it."""

    mdp: object
    policy: MeasurePolicy


@dataclass(frozen=True)
class SimConfig:
    population: int
    horizon: object
    policy: object
    replications: int
    seed: int
    truncation_error: float = 1e-6

    def __post_init__(self):
        if self.population < 1:
            raise ValueError("population must be >= 1")
        if self.replications < 1:
            raise ValueError("replications must be >= 1")


@dataclass(frozen=True)
class SimReport:
    population: int
    replications: int
    steps: int
    discount: float
    truncation_bound: float
    mean_cost: float
    std_error: object
    mean_measures: np.ndarray
    chaos_series: object

    def to_dict(self):
        return {
            "population": self.population,
            "replications": self.replications,
            "steps": self.steps,
            "discount": self.discount,
            "truncation_bound": self.truncation_bound,
            "mean_cost": self.mean_cost,
            "std_error": self.std_error,
            "mean_measures": self.mean_measures.tolist(),
            "chaos_series": None if self.chaos_series is None else self.chaos_series.tolist(),
        }


def _sample_rows(rows, rng):
    """One categorical draw per row of a stochastic matrix."""
    cum = rows.cumsum(axis=1)
    r = rng.random(rows.shape[0])
    idx = (cum < r[:, None]).sum(axis=1)
    return np.minimum(idx, rows.shape[1] - 1)


def _stage_kernels(policy, steps):
    if isinstance(policy, PolicyKernel):
        return [policy] * steps
    if isinstance(policy, (list, tuple)) and all(isinstance(k, PolicyKernel) for k in policy):
        if len(policy) == 1:
            return list(policy) * steps
        if len(policy) != steps:
            raise ValueError(f"got {len(policy)} kernels for {steps} stages")
        return list(policy)
    return None


def _rollout(model, policy, steps, beta, population, rng):
    """Simulate one population path; returns (discounted mean cost, the
    empirical-measure trajectory)."""
    num_states = model.num_states
    kernels = _stage_kernels(policy, steps)
    x = _sample_rows(np.broadcast_to(model.initial_dist, (population, num_states)), rng)
    traj = np.empty((steps + 1, num_states))
    cost = 0.0
    disc = 1.0
    for t in range(steps):
        counts = np.bincount(x, minlength=num_states)
        mu = counts / population
        traj[t] = mu
        if kernels is not None:
            rows = kernels[t].rows_for(mu)[x]
            u = _sample_rows(rows, rng)
        elif isinstance(policy, SymmetricSolution):
            stage = 0 if policy.stationary else t
            rows = policy.kernel_rows_at(tuple(int(c) for c in counts), stage)[x]
            u = _sample_rows(rows, rng)
        elif isinstance(policy, LiftedPolicy):
            ordinal = policy.mdp.index[tuple(int(c) for c in counts)]
            a = policy.policy.action_at(ordinal, t)
            theta = policy.mdp.actions[ordinal][a]
            u = realize_exchangeable_action(x, theta, rng)
        else:
            raise TypeError(f"unsupported policy {policy!r}")
        cmat = model.cost_matrix_at(mu)
        cost += disc * float(cmat[x, u].mean())
        disc *= beta
        tens = model.kernel_tensor_at(mu)
        x = _sample_rows(tens[x, u], rng)
    traj[steps] = np.bincount(x, minlength=num_states) / population
    return cost, traj


def _effective_steps(model, horizon):
    """(steps, beta, truncation bound) for a rollout horizon."""
    if isinstance(horizon, FiniteHorizon):
        return horizon.steps, _resolve_beta(model, horizon.beta, allow_one=True), 0.0
    if isinstance(horizon, DiscountedHorizon):
        b = _resolve_beta(model, horizon.beta, allow_one=False)
        return None, b, None
    raise TypeError(f"unsupported horizon {horizon!r}")


def simulate_n_agents(model, config, workers=None):
    """Monte Carlo estimate of the population-average cost.

    Discounted horizons are truncated at the first length whose geometric
    tail bound beta^T * c_max / (1 - beta) drops below the configured
    truncation error.  Replications use independent derived RNG streams
    and slot-indexed aggregation, so results do not depend on the worker
    count.
    """
    steps, beta, trunc = _effective_steps(model, config.horizon)
    if steps is None:
        c_max = model.max_stage_cost()
        tail = c_max / (1.0 - beta)
        steps = 1
        while tail * beta**steps > config.truncation_error and steps < 100_000:
            steps += 1
        trunc = tail * beta**steps
    if isinstance(config.policy, LiftedPolicy) and not config.policy.policy.stationary:
        if len(config.policy.policy.tables) < steps:
            raise ValueError("lifted policy has fewer stages than the rollout")

    def one(r):
        rng = _replication_rng(config.seed, r)
        return _rollout(model, config.policy, steps, beta, config.population, rng)

    results = _map_indexed(one, config.replications, _worker_count(workers))
    costs = np.array([c for c, _ in results])
    trajs = np.stack([t for _, t in results])
    mean_cost = float(costs.mean())
    if config.replications > 1:
        se = float(costs.std(ddof=1) / math.sqrt(config.replications))
    else:
        se = None
    chaos = None
    kernels = _stage_kernels(config.policy, steps)
    if kernels is not None:
        flow = flow_trajectory(model, model.initial_dist, kernels, steps)
        per_t = np.abs(trajs - flow).sum(axis=2).mean(axis=0)
        chaos = np.maximum.accumulate(per_t)
    return SimReport(
        population=config.population,
        replications=config.replications,
        steps=steps,
        discount=beta,
        truncation_bound=trunc,
        mean_cost=mean_cost,
        std_error=se,
        mean_measures=trajs.mean(axis=0),
        chaos_series=chaos,
    )


# ---- propagation of chaos ----


@dataclass(frozen=True)
class ChaosGapRow:
    population: int
    mean_max_gap: float
    std_error: object
    per_step_mean: np.ndarray
    per_step_se: object


def chaos_gap(model, populations, pi, steps, replications, seed, workers=None):
    """Estimate E[max_t ||mu^N_t - mu_t||_1] against the limit flow, per
    population size.  Initial states are i.i.d. from the model's initial
    distribution; the reference flow starts at that distribution exactly.
    """
    kernels = _stage_kernels(pi, steps)
    if kernels is None:
        raise TypeError("chaos_gap needs shared kernels")
    flow = flow_trajectory(model, model.initial_dist, kernels, steps)
    rows = []
    for population in populations:

        def one(r, population=population):
            rng = _replication_rng(seed, population, r)
            _, traj = _rollout(model, kernels, steps, 1.0, population, rng)
            gaps = np.abs(traj - flow).sum(axis=1)
            return gaps

        all_gaps = np.stack(_map_indexed(one, replications, _worker_count(workers)))
        max_gaps = all_gaps.max(axis=1)
        if replications > 1:
            se = float(max_gaps.std(ddof=1) / math.sqrt(replications))
            per_se = all_gaps.std(axis=0, ddof=1) / math.sqrt(replications)
        else:
            se = None
            per_se = None
        rows.append(
            ChaosGapRow(
                population=population,
                mean_max_gap=float(max_gaps.mean()),
                std_error=se,
                per_step_mean=all_gaps.mean(axis=0),
                per_step_se=per_se,
            )
        )
    return rows


# ---- Markov summary check ----


@dataclass(frozen=True)
class MarkovCheckReport:
    max_deviation: float
    per_step: tuple


def verify_markov_mf(model, population, pi, t_max=2):
    """Exact check that (own state, own action, empirical measure) is a
    controlled Markov summary of an agent's history.

    Builds the joint chain over all population state and action profiles by
    brute force, then compares, for every agent and every positive-
    probability private history (own states, own actions, measure path),
    the conditional law of (next own state, next measure) against the law
    conditioned on the current summary alone.  Returns the maximum
    total-variation deviation over transitions at times t < t_max.

    Under a shared kernel the deviation is zero up to roundoff; an
    agent-indexed kernel list (the intended negative control) generally
    breaks it once ambiguity about which other agent is where carries
    information.
    """
    N = population
    X, U = model.num_states, model.num_actions
    if N > 4 or X > 3 or U > 3:
        raise ValueError("exact history enumeration is limited to N <= 4, |X|,|U| <= 3")
    if isinstance(pi, PolicyKernel):
        agent_kernels = [pi] * N
    else:
        agent_kernels = list(pi)
        if len(agent_kernels) != N:
            raise ValueError(f"need one kernel per agent, got {len(agent_kernels)}")

    state_profiles = list(product(range(X), repeat=N))
    action_profiles = list(product(range(U), repeat=N))

    def measure_of(profile):
        counts = [0] * X
        for x in profile:
            counts[x] += 1
        return tuple(counts)

    # paths: (prob, states history, actions history), histories as tuples
    # of profiles.
    paths = []
    for s in state_profiles:
        p = 1.0
        for x in s:
            p *= float(model.initial_dist[x])
        if p > 0.0:
            paths.append((p, (s,), ()))

    per_step = []
    for t in range(t_max):
        # attach actions at time t
        expanded = []
        for prob, s_hist, a_hist in paths:
            s = s_hist[-1]
            mu_counts = measure_of(s)
            mu = np.asarray(mu_counts, dtype=float) / N
            rows = [agent_kernels[i].rows_for(mu)[s[i]] for i in range(N)]
            for a in action_profiles:
                pa = prob
                for i in range(N):
                    pa *= float(rows[i][a[i]])
                    if pa == 0.0:
                        break
                if pa > 0.0:
                    expanded.append((pa, s_hist, a_hist + (a,)))
        # transition laws and grouping
        priv_laws = {}
        priv_mass = {}
        priv_to_coarse = {}
        coarse_laws = {}
        coarse_mass = {}
        next_paths = []
        for prob, s_hist, a_hist in expanded:
            s, a = s_hist[-1], a_hist[-1]
            mu_counts = measure_of(s)
            mu = np.asarray(mu_counts, dtype=float) / N
            tens = model.kernel_tensor_at(mu)
            laws = [tens[s[i], a[i]] for i in range(N)]
            step_law = {}
            for s_next in state_profiles:
                ps = 1.0
                for i in range(N):
                    ps *= float(laws[i][s_next[i]])
                    if ps == 0.0:
                        break
                if ps == 0.0:
                    continue
                next_paths.append((prob * ps, s_hist + (s_next,), a_hist))
                step_law[s_next] = ps
            mu_path = tuple(measure_of(p) for p in s_hist)
            for i in range(N):
                law_i = {}
                for s_next, ps in step_law.items():
                    key = (s_next[i], measure_of(s_next))
                    law_i[key] = law_i.get(key, 0.0) + ps
                priv = (i, tuple(p[i] for p in s_hist), tuple(a[i] for a in a_hist), mu_path)
                coarse = (i, s[i], a[i], mu_counts, t)
                priv_to_coarse[priv] = coarse
                for store, mass, key in (
                    (priv_laws, priv_mass, priv),
                    (coarse_laws, coarse_mass, coarse),
                ):
                    mass[key] = mass.get(key, 0.0) + prob
                    bucket = store.setdefault(key, {})
                    for k, ps in law_i.items():
                        bucket[k] = bucket.get(k, 0.0) + prob * ps
        dev = 0.0
        for priv, bucket in priv_laws.items():
            coarse = priv_to_coarse[priv]
            cb = coarse_laws[coarse]
            pm, cm = priv_mass[priv], coarse_mass[coarse]
            keys = set(bucket) | set(cb)
            tv = 0.5 * sum(
                abs(bucket.get(k, 0.0) / pm - cb.get(k, 0.0) / cm) for k in keys
            )
            dev = max(dev, tv)
        per_step.append(dev)
        paths = next_paths
    return MarkovCheckReport(max_deviation=max(per_step), per_step=tuple(per_step))


# ---- optimality gap ----


@dataclass(frozen=True)
class GapRow:
    population: int
    optimal_value: object
    policy_value: object
    gap: object
    status: str


def epsilon_gap(model, populations, horizon, mesh, policy_mesh,
                cap=DEFAULT_ENUMERATION_CAP):
    """Exact optimality gap of the limit-derived shared policy per
    population size.

    For each N the exchangeable optimum comes from the lifted MDP and the
    deployed value from exact evaluation of the extracted kernels on the
    measure chain, both at the count vector nearest N times the initial
    distribution.  Populations whose enumeration exceeds the cap are
    reported as skipped.
    """
    mkv = build_mkv_mdp(model, mesh, policy_mesh, cap=cap)
    if isinstance(horizon, FiniteHorizon):
        sol = solve_mkv_finite(mkv, horizon.steps, beta=horizon.beta)
        kernels = extract_stage_policies(sol)
    elif isinstance(horizon, DiscountedHorizon):
        sol = solve_mkv_discounted(mkv, beta=horizon.beta, epsilon=horizon.epsilon)
        kernels = extract_mf_policy(sol)
    else:
        raise TypeError(f"unsupported horizon {horizon!r}")
    rows = []
    for population in populations:
        try:
            mdp = build_measure_mdp(model, population, cap=cap)
        except EnumerationCapError as err:
            rows.append(GapRow(population, None, None, None, f"skipped: {err}"))
            continue
        counts0 = round_to_counts(model.initial_dist, population)
        i0 = mdp.index[counts0]
        if isinstance(horizon, FiniteHorizon):
            values, _ = value_iteration_finite(mdp, horizon.steps, beta=horizon.beta)
            j_opt = float(values[0].values[i0])
        else:
            table, _ = value_iteration_discounted(
                mdp, beta=horizon.beta, epsilon=horizon.epsilon
            )
            j_opt = float(table.values[i0])
        j_pi = float(
            evaluate_symmetric_policy_exact(model, population, kernels, horizon, cap=cap)[i0]
        )
        gap = j_pi - j_opt
        if gap < -1e-9:
            raise RuntimeError(
                f"restricted policy beat the exchangeable optimum by {-gap} at N={population}"
            )
        rows.append(GapRow(population, j_opt, j_pi, gap, "ok"))
    return rows
