"""Deterministic mean-field limit of the team problem.

In the infinite-population limit the empirical measure evolves
deterministically: under a joint measure theta the next measure is the
push-forward mu'(x') = sum_{x,u} T(x'|x,u,mu) theta(x,u).  The limit
control problem is quantized onto a simplex grid over measures and a
finite grid of per-state action kernels; transitions project the exact
flow back onto the grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lifted import PolicyKernel, _resolve_beta
from .measures import DEFAULT_ENUMERATION_CAP, policy_grid, simplex_grid
from .model import MARGINAL_TOL, MarginalMismatchError

_MAX_SWEEPS = 1_000_000


def mean_field_flow(model, mu, theta):
    """Next measure under the limit dynamics; theta must have state
    marginal mu within the marginal tolerance."""
    mu = np.asarray(mu, dtype=float)
    theta = np.asarray(theta, dtype=float)
    gap = np.abs(theta.sum(axis=1) - mu).max()
    if gap > MARGINAL_TOL:
        raise MarginalMismatchError(f"state marginal of theta deviates from mu by {gap}")
    tens = model.kernel_tensor_at(mu)
    return np.einsum("xu,xuy->y", theta, tens)


@dataclass(frozen=True)
class MkvMDP:
    """Quantized limit MDP: per (grid point, kernel) a stage cost and a
    deterministic successor ordinal."""

    model: object
    state_grid: object
    policy_set: object
    stage_cost: np.ndarray
    successor: np.ndarray


def build_mkv_mdp(model, mesh, policy_mesh, cap=DEFAULT_ENUMERATION_CAP):
    state_grid = simplex_grid(mesh, model.num_states, cap=cap)
    policies = policy_grid(policy_mesh, model.num_states, model.num_actions, cap=cap)
    G, P = len(state_grid), len(policies)
    cost = np.empty((G, P))
    succ = np.empty((G, P), dtype=np.int64)
    for g in range(G):
        mu = state_grid.point(g)
        cmat = model.cost_matrix_at(mu)
        for p in range(P):
            theta = mu[:, None] * policies.kernels[p]
            cost[g, p] = float((cmat * theta).sum())
            succ[g, p] = state_grid.project(mean_field_flow(model, mu, theta))
    cost.setflags(write=False)
    succ.setflags(write=False)
    return MkvMDP(model, state_grid, policies, cost, succ)


@dataclass(frozen=True)
class MkvSolution:
    """Values and chosen kernel ordinals per grid point, one table per
    stage (or a single stationary table)."""

    mdp: MkvMDP
    values: tuple
    choices: tuple
    stationary: bool


def solve_mkv_finite(mkv, steps, beta=None):
    b = _resolve_beta(mkv.model, beta, allow_one=True)
    values = [None] * steps
    choices = [None] * steps
    nxt = np.zeros(len(mkv.state_grid))
    for t in range(steps - 1, -1, -1):
        q = mkv.stage_cost.copy()
        if t < steps - 1:
            q += b * nxt[mkv.successor]
        act = q.argmin(axis=1)
        nxt = q[np.arange(q.shape[0]), act]
        values[t] = nxt
        choices[t] = act
    return MkvSolution(mkv, tuple(values), tuple(choices), False)


def solve_mkv_discounted(mkv, beta=None, epsilon=1e-8):
    b = _resolve_beta(mkv.model, beta, allow_one=False)
    threshold = epsilon * (1.0 - b) / (2.0 * b)
    values = np.zeros(len(mkv.state_grid))
    for _ in range(_MAX_SWEEPS):
        q = mkv.stage_cost + b * values[mkv.successor]
        act = q.argmin(axis=1)
        new = q[np.arange(q.shape[0]), act]
        gap = float(np.abs(new - values).max())
        values = new
        if gap <= threshold:
            return MkvSolution(mkv, (values,), (act,), True)
    raise RuntimeError("mean-field value iteration failed to converge")


def extract_mf_policy(solution, stage=0):
    """Chosen kernels as a PolicyKernel over the state grid."""
    table = solution.choices[0] if solution.stationary else solution.choices[stage]
    kernels = solution.mdp.policy_set.kernels[table]
    return PolicyKernel(solution.mdp.state_grid, kernels)


def extract_stage_policies(solution):
    """One PolicyKernel per stage; a stationary solution yields one."""
    if solution.stationary:
        return [extract_mf_policy(solution)]
    return [extract_mf_policy(solution, stage=t) for t in range(len(solution.choices))]


def flow_trajectory(model, mu0, pi, steps):
    """Exact limit flow mu_0..mu_steps under shared kernels.

    `pi` is a PolicyKernel or a per-stage sequence; the kernel lookup at
    the grid point nearest mu is the only quantized element, the flow
    itself is not projected.
    """
    kernels = list(pi) if isinstance(pi, (list, tuple)) else [pi] * steps
    if len(kernels) != steps:
        raise ValueError(f"got {len(kernels)} kernels for {steps} steps")
    mu = np.asarray(mu0, dtype=float)
    out = np.empty((steps + 1, mu.size))
    out[0] = mu
    for t in range(steps):
        rows = kernels[t].rows_for(out[t])
        theta = out[t][:, None] * rows
        out[t + 1] = mean_field_flow(model, out[t], theta)
    return out
