"""Box-constrained smooth NLP solver and the per-scenario deterministic solve.

The solver is a limited-memory BFGS descent with gradient projection onto
the box: search directions come from the two-loop recursion restricted to
the inactive variables, candidates are projected back onto the box, and an
Armijo backtracking line search runs along the projected path.  It is
deterministic for fixed inputs and safe to call from concurrent workers
(no shared mutable state).

The per-scenario problem

    min_{u, mu >= 0}  J(u, w) + rho * mu   subject to  g(u, w) <= mu

is transcribed as single shooting.  The slack price rho sits far above the
floor constraint's shadow price, so mu never buys constraint violation: its
optimal value is simply the smallest slack that makes the constraint
satisfiable at all.  That value is computable in closed form here, because
the lymphocyte dynamics depend on the controls only through the drug
concentration and are monotone in it: the zero-chemotherapy rollout
maximizes every predicted x2 node simultaneously, so

    mu* = max(0, x2_min - min_i x2(i | u2 = 0))

and the effective decision is the control sequence alone.  The floor is
then enforced per trajectory node by augmented quadratic hinge penalties
whose multiplier estimates update across outer phases (weight escalation
only when progress stalls) until the hard residual max(0, g - mu) meets
RESIDUAL_TARGET; the multiplier term is what lets a bounded penalty weight
reach that target even though the constraint's shadow price is large.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import _kernels
from . import ocp as ocp_mod
from .model import IntegrationError, U_LOWER, U_UPPER
from .ocp import OcpConfig

MU_MAX = 10.0                 # slack cap; g is O(1) so this is never active
RESIDUAL_TARGET = 1e-4        # outer phases stop once max(0, g - mu) falls below
MAX_OUTER_PHASES = 30         # augmented-penalty outer iterations per solve
STALL_FACTOR = 0.9            # a phase must cut the residual by at least this
                              # factor to count as progress
PLATEAU_PHASES = 2            # stalled phases tolerated before escalating (or,
                              # at the penalty cap, accepting the plateau)


@dataclass(frozen=True)
class NlpProblem:
    """Smooth objective over a box: objective(z) -> (value, gradient)."""

    objective: Callable[[np.ndarray], tuple]
    lower: np.ndarray
    upper: np.ndarray

    @property
    def dim(self) -> int:
        return self.lower.shape[0]


@dataclass
class SolveResult:
    z_star: np.ndarray
    f_star: float
    iterations: int
    converged: bool
    wall_time: float
    n_evals: int
    pg_norm: float


@dataclass(frozen=True)
class SolverConfig:
    max_iter: int = 200
    tol: float = 1e-6              # projected-gradient infinity-norm tolerance
    mu_penalty_growth: float = 10.0
    penalty_cap: float = 1e5       # hinge weights beyond this wreck the inner
                                   # conditioning; multipliers do the real work
    penalty_init: float = 1e4
    memory: int = 10

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.tol <= 0:
            raise ValueError("tol must be positive")


@dataclass
class SolveRecord:
    """One scenario solve: the atom of the clustering datasets."""

    w: np.ndarray
    u_star: np.ndarray          # (N, 2)
    J_star: float
    g_star: float               # hard constraint indicator at u_star
    mu_star: float
    origin_step: int
    converged: bool
    x_origin: np.ndarray
    wall_time: float
    iterations: int


def _project(z, lo, hi, out=None):
    return np.clip(z, lo, hi, out=out)


def solve(problem: NlpProblem, z0, cfg: SolverConfig) -> SolveResult:
    """Minimize a smooth objective over a box from z0 (projected first).

    The first trial step is capped by a persistent trust length so that a
    badly scaled quasi-Newton direction (common right after hinge-penalty
    activity changes) costs one backtrack instead of dozens; backtracking
    uses safeguarded quadratic interpolation on the projected path.
    """
    lo = problem.lower
    hi = problem.upper
    z = _project(np.asarray(z0, dtype=np.float64).copy(), lo, hi)
    t_start = time.perf_counter()
    f, g = problem.objective(z)
    n_evals = 1
    mem_s: list[np.ndarray] = []
    mem_y: list[np.ndarray] = []
    mem_rho: list[float] = []
    converged = False
    pg_norm = np.inf
    it = 0
    fallback_used = False
    trust = 1.0  # cap on the infinity-norm of the first trial step
    box_span = float(np.max(hi - lo))

    while it < cfg.max_iter:
        pg = z - _project(z - g, lo, hi)
        pg_norm = float(np.max(np.abs(pg)))
        if pg_norm <= cfg.tol:
            converged = True
            break

        at_lo = z <= lo
        at_hi = z >= hi
        if mem_s:
            d = _two_loop(g, mem_s, mem_y, mem_rho)
            # freeze variables pinned at a bound with the gradient pushing out
            active = (at_lo & (g > 0)) | (at_hi & (g < 0))
            d[active] = 0.0
            # a pinned variable whose gradient wants it inside the box must
            # not keep an outward quasi-Newton component (the projection
            # would silently erase it and the variable could never lift off)
            stuck = (at_lo & (d < 0)) | (at_hi & (d > 0))
            d[stuck] = -g[stuck]
            if float(d @ g) >= -1e-14 * float(np.linalg.norm(d)) * float(np.linalg.norm(g)):
                d = -g
        else:
            d = -g

        d_norm = float(np.max(np.abs(d)))
        if d_norm == 0.0:
            break
        alpha = min(1.0, trust / d_norm)

        accepted = False
        backtracks = 0
        for _ in range(60):
            z_new = _project(z + alpha * d, lo, hi)
            step = z_new - z
            if not np.any(step):
                break
            f_new, g_new = problem.objective(z_new)
            n_evals += 1
            slope = float(g @ step)
            if f_new <= f + 1e-4 * slope:
                accepted = True
                break
            backtracks += 1
            # safeguarded quadratic interpolation in the step scale
            denom = 2.0 * (f_new - f - slope)
            alpha_q = -slope * alpha / denom if denom > 0 else 0.5 * alpha
            alpha = min(max(alpha_q, 0.1 * alpha), 0.5 * alpha)

        if not accepted:
            if mem_s and not fallback_used:
                # stale curvature pairs can produce a bad scale; retry clean
                mem_s.clear()
                mem_y.clear()
                mem_rho.clear()
                fallback_used = True
                trust = max(0.25 * trust, 1e-10)
                it += 1
                continue
            # near the optimum the largest certifiable decrease |g|^2/2H can
            # sink below the float noise on f; the analytic gradient is still
            # exact, so fall back to accepting steps that shrink the exact
            # projected gradient (2-norm: monotone along descent directions
            # for small steps, unlike the max-norm) instead of f
            rescued = False
            pg2 = float(np.linalg.norm(pg))
            for d_try in (d, -g):
                alpha = min(1.0, trust / max(float(np.max(np.abs(d_try))), 1e-300))
                for _ in range(30):
                    z_new = _project(z + alpha * d_try, lo, hi)
                    if np.any(z_new != z):
                        f_new, g_new = problem.objective(z_new)
                        n_evals += 1
                        pg2_new = float(np.linalg.norm(
                            z_new - _project(z_new - g_new, lo, hi)))
                        if pg2_new <= (1.0 - 1e-3) * pg2:
                            s = z_new - z
                            y = g_new - g
                            sy = float(s @ y)
                            if sy > 1e-10 * float(np.linalg.norm(s)) * float(np.linalg.norm(y)):
                                mem_s.append(s)
                                mem_y.append(y)
                                mem_rho.append(1.0 / sy)
                                if len(mem_s) > cfg.memory:
                                    mem_s.pop(0)
                                    mem_y.pop(0)
                                    mem_rho.pop(0)
                            z, f, g = z_new, f_new, g_new
                            rescued = True
                            break
                    alpha *= 0.5
                if rescued:
                    break
            if rescued:
                it += 1
                continue
            break  # line-search failure: return best (current) iterate

        fallback_used = False
        step_len = float(np.max(np.abs(z_new - z)))
        if backtracks == 0:
            trust = min(2.0 * max(trust, step_len), box_span)
        else:
            trust = max(step_len, 1e-10)
        s = z_new - z
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-10 * float(np.linalg.norm(s)) * float(np.linalg.norm(y)):
            mem_s.append(s)
            mem_y.append(y)
            mem_rho.append(1.0 / sy)
            if len(mem_s) > cfg.memory:
                mem_s.pop(0)
                mem_y.pop(0)
                mem_rho.pop(0)
        z, f, g = z_new, f_new, g_new
        it += 1

    return SolveResult(
        z_star=z,
        f_star=float(f),
        iterations=it,
        converged=converged,
        wall_time=time.perf_counter() - t_start,
        n_evals=n_evals,
        pg_norm=pg_norm,
    )


def _two_loop(g, mem_s, mem_y, mem_rho):
    """Standard L-BFGS two-loop recursion with gamma scaling."""
    q = g.copy()
    m = len(mem_s)
    alphas = np.empty(m)
    for i in range(m - 1, -1, -1):
        alphas[i] = mem_rho[i] * float(mem_s[i] @ q)
        q -= alphas[i] * mem_y[i]
    gamma = (1.0 / mem_rho[-1]) / float(mem_y[-1] @ mem_y[-1])
    q *= gamma
    for i in range(m):
        beta = mem_rho[i] * float(mem_y[i] @ q)
        q += (alphas[i] - beta) * mem_s[i]
    return -q


def control_bounds(n: int):
    """Box bounds for a flattened control-sequence decision vector."""
    lo = np.tile(U_LOWER, n)
    hi = np.tile(U_UPPER, n)
    return lo, hi


def feasibility_slack(x, w, cfg_ocp: OcpConfig, offset: float = 0.0) -> float:
    """Smallest slack that makes the (offset) floor constraint satisfiable.

    The zero-control rollout maximizes every predicted x2 node at once (the
    lymphocyte equation sees the controls only through the monotone drug
    concentration), so the unavoidable violation is read off directly.
    """
    n = cfg_ocp.N
    consts = cfg_ocp.consts
    traj, ok = _kernels.rollout(
        np.asarray(x, dtype=np.float64),
        np.zeros((n, 2)),
        np.asarray(w, dtype=np.float64),
        consts.h,
        np.asarray(consts.xbar, dtype=np.float64),
        cfg_ocp.tau,
        cfg_ocp.substeps,
    )
    if not ok:
        raise IntegrationError("rollout diverged while computing the feasibility slack")
    worst = float(np.max(cfg_ocp.x2_min + offset - traj[1:, 1]))
    return min(max(0.0, worst), MU_MAX)


def make_penalty_objective(x, w, cfg_ocp: OcpConfig, penalty: float,
                           multipliers: Optional[np.ndarray] = None,
                           offset: float = 0.0, cost_weight: float = 1.0,
                           mu: float = 0.0,
                           forced: Optional[np.ndarray] = None):
    """Folded objective for one scenario over the flattened control sequence:

        cost_weight * J(u)
          + sum_i penalty * max(0, nu_i/(2*penalty)
                                   + x2_min + offset - x2(i) - mu)^2

    The lymphocyte floor is softened per trajectory node (vectorized hinge
    penalties, smooth except on the hinge itself); ``multipliers`` are the
    per-node augmented-penalty estimates, ``offset`` shifts the floor (used
    for cluster dispersion inflation) and ``mu`` is the fixed feasibility
    slack.  With zero multipliers this is the plain quadratic penalty on
    every node of the constraint, whose node maximum equals the reported
    scalar indicator g = x2_min - min_i x2(i).
    """
    n = cfg_ocp.N
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    nus = np.zeros(n) if multipliers is None else np.asarray(multipliers, dtype=np.float64)
    modes = np.zeros(n) if forced is None else np.asarray(forced, dtype=np.float64)
    consts = cfg_ocp.consts
    xbar = np.asarray(consts.xbar, dtype=np.float64)

    def objective(z):
        u = z.reshape(n, 2)
        value, _J, _g, dval, _dmu, ok = _kernels.eval_ocp_penalized(
            x, u, w, consts.h, xbar, cfg_ocp.tau, cfg_ocp.substeps,
            cfg_ocp.rho_f, cfg_ocp.rho_u, cfg_ocp.x2_min,
            cost_weight, offset, mu, penalty, nus, modes,
        )
        if not ok:
            raise IntegrationError("rollout diverged inside a penalized objective")
        return value, dval.ravel()

    return objective


def _box_qp(H, q, lo, hi, s0, max_iter=60):
    """min 0.5 s'Hs + q's over a box, by free-set Newton with projected
    Armijo backtracking; H must be positive definite."""
    m = q.shape[0]
    s = np.clip(s0, lo, hi)
    value = 0.5 * float(s @ H @ s) + float(q @ s)
    for _ in range(max_iter):
        grad = H @ s + q
        clamped = ((s <= lo) & (grad > 0)) | ((s >= hi) & (grad < 0))
        free = ~clamped
        if not np.any(free):
            break
        if float(np.max(np.abs(grad[free]))) <= 1e-12:
            break
        d = np.zeros(m)
        rhs = -(q[free] + (H[np.ix_(free, clamped)] @ s[clamped]
                           if np.any(clamped) else 0.0))
        try:
            chol = np.linalg.cholesky(H[np.ix_(free, free)])
            target = np.linalg.solve(chol.T, np.linalg.solve(chol, rhs))
        except np.linalg.LinAlgError:
            target = s[free] - grad[free]
        d[free] = target - s[free]
        slope = float(d @ grad)
        if slope >= 0.0:
            break
        alpha = 1.0
        improved = False
        for _ in range(30):
            s_new = np.clip(s + alpha * d, lo, hi)
            v_new = 0.5 * float(s_new @ H @ s_new) + float(q @ s_new)
            if v_new < value - 1e-14 * max(1.0, abs(value)):
                improved = True
                break
            alpha *= 0.5
        if not improved:
            break
        if np.array_equal(s_new, s):
            break
        s, value = s_new, v_new
    return s


def gauss_newton_polish(terms, cfg_ocp: OcpConfig, penalty: float, mu: float,
                        z0, lo, hi, cfg_solver: SolverConfig,
                        max_rounds: int = 20):
    """Second-order polish of the penalty-folded objective.

    ``terms`` is a list of (x, w, cost_weight, offset, nus_row): one entry
    per scenario sharing the control sequence.  Each round forms the exact
    gradient and the Gauss-Newton Hessian of the active hinge penalties from
    the per-node sensitivities, solves a small box-QP for the step, and
    accepts on projected-gradient decrease (the first-order methods stall
    here because certifiable objective decreases shrink below the float
    noise on f long before the gradient is small).

    Returns (z, converged, n_rounds).
    """
    n = cfg_ocp.N
    m = 2 * n
    consts = cfg_ocp.consts
    xbar = np.asarray(consts.xbar, dtype=np.float64)
    x2_min = cfg_ocp.x2_min

    def grad_and_hess(zz):
        u = zz.reshape(n, 2)
        g = np.zeros(m)
        H = np.zeros((m, m))
        for x, w, cw, off, nus in terms:
            J, dJ, x2n, G, _traj, ok = _kernels.node_sensitivities(
                x, u, w, consts.h, xbar, cfg_ocp.tau, cfg_ocp.substeps,
                cfg_ocp.rho_f, cfg_ocp.rho_u,
            )
            if not ok:
                raise IntegrationError("rollout diverged inside the polish")
            g += cw * dJ.ravel()
            for i in range(n):
                r = nus[i] / (2.0 * penalty) + x2_min + off - x2n[i] - mu
                if r > 0.0:
                    gi = G[i].ravel()
                    g += (-2.0 * penalty * r) * gi
                    H += (2.0 * penalty) * np.outer(gi, gi)
        return g, H

    z = np.asarray(z0, dtype=np.float64).copy()
    g, H = grad_and_hess(z)
    pg = z - _project(z - g, lo, hi)
    pg2 = float(np.linalg.norm(pg))
    lm = 1e-4
    rounds = 0
    for rounds in range(1, max_rounds + 1):
        if float(np.max(np.abs(pg))) <= cfg_solver.tol:
            return z, True, rounds
        accepted = False
        for _ in range(10):
            Hreg = H + lm * np.eye(m)
            s = _box_qp(Hreg, g, lo - z, hi - z, np.zeros(m))
            z_new = _project(z + s, lo, hi)
            if not np.any(z_new != z):
                lm *= 10.0
                continue
            g_new, H_new = grad_and_hess(z_new)
            pg_new = z_new - _project(z_new - g_new, lo, hi)
            pg2_new = float(np.linalg.norm(pg_new))
            if pg2_new < pg2:
                z, g, H, pg, pg2 = z_new, g_new, H_new, pg_new, pg2_new
                lm = max(lm / 3.0, 1e-8)
                accepted = True
                break
            lm *= 10.0
        if not accepted:
            break
    return z, float(np.max(np.abs(pg))) <= cfg_solver.tol, rounds


def run_penalty_phases(build_objective, measure, polish, z0, lo, hi,
                       cfg_solver: SolverConfig):
    """Shared augmented-penalty outer loop.

    ``build_objective(penalty)`` returns the inner objective for the current
    multiplier estimates; ``measure(z, penalty)`` evaluates the iterate,
    updates the multipliers in place, and returns the hard constraint
    residual; ``polish(z, penalty)`` runs the second-order Gauss-Newton
    finisher and returns (z, converged).  The inner tolerance starts loose
    and tightens as the multipliers settle; the penalty weight escalates
    only when phases stop cutting the residual, and a plateau at the weight
    cap is accepted (the multipliers already carry the constraint as well
    as they ever will).  The quasi-Newton phases do the global work; the
    polish earns the stationarity certificate the first-order line search
    cannot certify once objective decreases fall below float noise.
    """
    z = np.asarray(z0, dtype=np.float64).copy()
    penalty = cfg_solver.penalty_init
    iterations = 0
    converged = False
    prev_residual = np.inf
    plateau = 0
    omega = max(cfg_solver.tol, 1e-2)
    for _ in range(MAX_OUTER_PHASES):
        prob = NlpProblem(objective=build_objective(penalty), lower=lo, upper=hi)
        res = solve(prob, z, dataclasses.replace(cfg_solver, tol=omega))
        z = res.z_star
        iterations += res.iterations
        converged = res.converged
        residual = measure(z, penalty)
        if residual <= RESIDUAL_TARGET:
            if omega <= cfg_solver.tol:
                break
            omega = cfg_solver.tol  # feasible: polish at full tolerance
            continue
        if residual > STALL_FACTOR * prev_residual:
            plateau += 1
        else:
            plateau = 0
        if plateau >= PLATEAU_PHASES:
            if penalty < cfg_solver.penalty_cap:
                penalty = min(penalty * cfg_solver.mu_penalty_growth, cfg_solver.penalty_cap)
                plateau = 0
            else:
                break
        prev_residual = residual
        omega = max(cfg_solver.tol, 0.3 * omega)

    if not converged:
        z, converged, rounds = polish(z, penalty)
        iterations += rounds
    measure(z, penalty)
    return z, iterations, converged


def solve_nominal(x, w, cfg_ocp: OcpConfig, cfg_solver: SolverConfig,
                  warm: Optional[np.ndarray] = None,
                  origin_step: int = 0) -> SolveRecord:
    """Solve the deterministic problem for one known parameter vector.

    Starts from the warm control sequence when given (all-zero controls
    otherwise), pins the slack at the feasibility level, and runs the
    augmented-penalty phases; reports the unpenalized cost/constraint at
    the returned controls.
    """
    n = cfg_ocp.N
    lo, hi = control_bounds(n)
    z = np.zeros(2 * n)
    if warm is not None:
        z[:] = np.asarray(warm, dtype=np.float64).reshape(n, 2).ravel()
    t_start = time.perf_counter()
    mu = feasibility_slack(x, w, cfg_ocp)
    nus = np.zeros(n)
    last_ev = {}

    def build(penalty, forced=None):
        return make_penalty_objective(x, w, cfg_ocp, penalty, nus, mu=mu, forced=forced)

    def measure(zz, penalty):
        ev = ocp_mod.evaluate(x, zz.reshape(n, 2), w, cfg_ocp)
        last_ev["ev"] = ev
        residual = max(0.0, ev.g - mu)
        node_c = cfg_ocp.x2_min - ev.trajectory[1:, 1] - mu
        if residual > RESIDUAL_TARGET:
            np.maximum(0.0, nus + 2.0 * penalty * node_c, out=nus)
        forced = np.where(nus / (2.0 * penalty) + node_c > 0.0, 1.0, -1.0)
        return residual, forced

    z, iterations, converged = run_penalty_phases(build, measure, z, lo, hi, cfg_solver)
    ev = last_ev["ev"]
    return SolveRecord(
        w=np.asarray(w, dtype=np.float64).copy(),
        u_star=z.reshape(n, 2).copy(),
        J_star=ev.J,
        g_star=ev.g,
        mu_star=mu,
        origin_step=origin_step,
        converged=converged,
        x_origin=np.asarray(x, dtype=np.float64).copy(),
        wall_time=time.perf_counter() - t_start,
        iterations=iterations,
    )
