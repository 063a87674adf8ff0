"""Cluster-scenario stochastic OCP assembly and solve.

The stochastic objective is the population-weighted sum of per-cluster
costs, each inflated by a dispersion term proportional to the in-cluster
cost standard deviation; inflated per-cluster constraints share one scalar
slack with a linear penalty:

    min_{u, mu}  sum_i p_i * [ J(u, w_i) + cJ * sqrt(sigma_J_i) + rho * mu ]
    s.t.         g(u, w_i) + cg * sqrt(sigma_g_i) <= mu    for every cluster i
                 mu >= 0

with cJ = (1 - eps_J)/eps_J and cg = (1 - eps_g)/eps_g.  The constraints
are folded into the objective by the same escalated quadratic penalty used
for the per-scenario deterministic solves.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ocp as ocp_mod
from . import solver as solver_mod
from .clustering import ClusterSummary
from .ocp import OcpConfig
from .solver import NlpProblem, SolverConfig


@dataclass(frozen=True)
class SnmpcConfig:
    eps_J: float = 0.1
    eps_g: float = 0.1
    rho: float = 1e5            # slack price, matches the per-scenario problem

    def __post_init__(self):
        if not 0 < self.eps_J < 1 or not 0 < self.eps_g < 1:
            raise ValueError("confidence parameters must lie in (0, 1)")

    @property
    def cost_inflation(self) -> float:
        return (1.0 - self.eps_J) / self.eps_J

    @property
    def constraint_inflation(self) -> float:
        return (1.0 - self.eps_g) / self.eps_g


@dataclass(frozen=True)
class SnmpcProblem:
    x: np.ndarray
    summary: ClusterSummary
    cfg: SnmpcConfig
    cfg_ocp: OcpConfig

    def __post_init__(self):
        if self.summary.n_clusters < 1:
            raise ValueError("summary must contain at least one cluster")
        if abs(float(self.summary.p.sum()) - 1.0) > 1e-9:
            raise ValueError("cluster weights must sum to 1")


@dataclass
class SnmpcSolution:
    u_star: np.ndarray
    mu_star: float
    J_stoch: float              # stochastic objective at the solution (no penalty)
    per_cluster_g: np.ndarray   # raw constraint value per cluster at u_star
    converged: bool
    iterations: int
    wall_time: float


def stochastic_value(p: SnmpcProblem, u, mu: float) -> float:
    """Weighted-sum objective at (u, mu), exactly as the solver sees it
    minus the constraint penalty term."""
    total = 0.0
    cj = p.cfg.cost_inflation
    for i in range(p.summary.n_clusters):
        ev = ocp_mod.evaluate(p.x, u, p.summary.w_centers[i], p.cfg_ocp)
        total += p.summary.p[i] * (
            ev.J + cj * np.sqrt(p.summary.sigma_J[i]) + p.cfg.rho * mu
        )
    return float(total)


def assemble_objective(p: SnmpcProblem, penalty: float, multipliers=None,
                       mu: float = 0.0, forced=None):
    """Penalized objective callable (value, gradient) over the flattened
    control sequence.

    The dispersion terms and the slack term rho*mu are constant in the
    decision (weights sum to one), and each cluster contributes one rollout
    per evaluation.  Every cluster's inflated floor constraint is enforced
    individually by per-node hinge penalties sharing the single feasibility
    slack mu; ``multipliers`` is the (n_clusters, N) array of
    augmented-penalty estimates (zeros give the plain quadratic penalty).
    """
    n = p.cfg_ocp.N
    k = p.summary.n_clusters
    weights = p.summary.p
    centers = p.summary.w_centers
    const_term = float(np.sum(weights * p.cfg.cost_inflation * np.sqrt(p.summary.sigma_J)))
    const_term += p.cfg.rho * mu  # weights sum to one
    infl_g = p.cfg.constraint_inflation * np.sqrt(p.summary.sigma_g)
    nus = np.zeros((k, n)) if multipliers is None else np.asarray(multipliers, dtype=np.float64)
    modes = np.zeros((k, n)) if forced is None else np.asarray(forced, dtype=np.float64)
    cluster_objs = [
        solver_mod.make_penalty_objective(
            p.x, centers[i], p.cfg_ocp, penalty,
            multipliers=nus[i], offset=float(infl_g[i]), cost_weight=float(weights[i]),
            mu=mu, forced=modes[i],
        )
        for i in range(k)
    ]

    def objective(z):
        value = const_term
        grad = np.zeros(2 * n)
        for obj in cluster_objs:
            v, g = obj(z)
            value += v
            grad += g
        return value, grad

    return objective


def solve_snmpc(p: SnmpcProblem, cfg_solver: SolverConfig,
                warm: Optional[np.ndarray] = None) -> SnmpcSolution:
    """Solve the cluster-scenario problem with augmented-penalty phases until
    every inflated per-cluster hard constraint is within the shared slack."""
    n = p.cfg_ocp.N
    k = p.summary.n_clusters
    lo, hi = solver_mod.control_bounds(n)
    z = np.zeros(2 * n)
    if warm is not None:
        z[:] = np.asarray(warm, dtype=np.float64).reshape(n, 2).ravel()
    infl_g = p.cfg.constraint_inflation * np.sqrt(p.summary.sigma_g)
    t_start = time.perf_counter()
    # one shared slack: the worst cluster's unavoidable (inflated) violation
    mu = max(
        solver_mod.feasibility_slack(p.x, p.summary.w_centers[i], p.cfg_ocp,
                                     offset=float(infl_g[i]))
        for i in range(k)
    )
    nus = np.zeros((k, n))
    last = {}

    def build(penalty, forced=None):
        return assemble_objective(p, penalty, nus, mu, forced=forced)

    def measure(zz, penalty):
        u = zz.reshape(n, 2)
        evs = [
            ocp_mod.evaluate(p.x, u, p.summary.w_centers[i], p.cfg_ocp)
            for i in range(k)
        ]
        g_raw = np.array([ev.g for ev in evs])
        last["g_raw"] = g_raw
        residual = float(np.max(np.maximum(0.0, g_raw + infl_g - mu)))
        node_c = np.array([
            p.cfg_ocp.x2_min + infl_g[i] - evs[i].trajectory[1:, 1] - mu
            for i in range(k)
        ])
        if residual > solver_mod.RESIDUAL_TARGET:
            np.maximum(0.0, nus + 2.0 * penalty * node_c, out=nus)
        forced = np.where(nus / (2.0 * penalty) + node_c > 0.0, 1.0, -1.0)
        return residual, forced

    z, iterations, converged = solver_mod.run_penalty_phases(
        build, measure, z, lo, hi, cfg_solver)
    u = z.reshape(n, 2)
    return SnmpcSolution(
        u_star=u.copy(),
        mu_star=mu,
        J_stoch=stochastic_value(p, u, mu),
        per_cluster_g=last["g_raw"],
        converged=converged,
        iterations=iterations,
        wall_time=time.perf_counter() - t_start,
    )
