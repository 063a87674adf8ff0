"""Closed-loop receding-horizon engine.

Runs either the nominal controller (plans with nominal parameters) or the
stochastic one (samples scenarios, solves them in parallel, clusters the
buffered solutions, and solves the cluster-scenario problem) against a
plant with fixed true parameters.  The first ``steps_per_update`` moves of
each plan are applied before re-solving; plans are warm-started from the
previous solution shifted by the number of applied steps.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import model as model_mod
from . import ocp as ocp_mod
from .buffer import BadBatch, FifoBuffer
from .clustering import ClusteringConfig, ClusterSummary, cluster_records
from .model import IntegrationError, nominal_parameters
from .ocp import OcpConfig
from .sampling import STREAM_BUFFER, STREAM_CLUSTER, SamplerConfig, derive_seed, draw
from .snmpc import SnmpcConfig, SnmpcProblem, solve_snmpc
from .solver import SolveRecord, SolverConfig, solve_nominal

CONTROLLERS = ("nominal", "stochastic")


@dataclass(frozen=True)
class SimConfig:
    duration: float = 40.0            # days
    steps_per_update: int = 5         # control period = steps_per_update * tau
    x0: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.15, 0.0, 1.0]))
    controller: str = "nominal"
    N_n: int = 25                     # fresh scenarios per control period
    q: int = 4                        # batches kept in the FIFO buffer
    solve_workers: int = 1            # threads for the per-scenario solves
    ocp: OcpConfig = field(default_factory=OcpConfig)
    snmpc: SnmpcConfig = field(default_factory=SnmpcConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    clustering: ClusteringConfig = field(default_factory=ClusteringConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)

    @property
    def tau(self) -> float:
        return self.ocp.tau

    @property
    def n_periods(self) -> int:
        return int(round(self.duration / (self.tau * self.steps_per_update)))

    def __post_init__(self):
        if self.controller not in CONTROLLERS:
            raise ValueError(f"controller must be one of {CONTROLLERS}")
        period = self.tau * self.steps_per_update
        k = self.duration / period
        if abs(k - round(k)) > 1e-9:
            raise ValueError("duration must be an integer number of control periods")


@dataclass
class ClosedLoopTrace:
    controller: str
    times: np.ndarray                      # (n_tau + 1,)
    states: np.ndarray                     # (n_tau + 1, 4)
    controls: np.ndarray                   # (n_tau, 2)
    solve_ms: np.ndarray                   # per period, the applied-plan solve
    batch_ms: Optional[np.ndarray]         # per period, scenario-batch wall time
    converged: np.ndarray                  # per period
    summaries: Optional[list]              # per period ClusterSummary (stochastic)
    x2_min: float
    max_nominal_residual: float            # max over converged scenario solves of max(0, g* - mu*)
    max_snmpc_residual: float              # max over SNMPC solves of max_i(0, g_i + infl_i - mu*)
    failures: list

    @property
    def terminal_x1(self) -> float:
        return float(self.states[-1, 0])

    @property
    def min_x2(self) -> float:
        return float(self.states[:, 1].min())

    @property
    def violated(self) -> bool:
        return self.min_x2 < self.x2_min


def shift_warm_start(u_prev: np.ndarray, steps: int) -> np.ndarray:
    """Drop the applied prefix and pad by repeating the final input."""
    tail = np.repeat(u_prev[-1:], steps, axis=0)
    return np.vstack([u_prev[steps:], tail])


def _make_trace(cfg: SimConfig, stochastic: bool) -> ClosedLoopTrace:
    n_tau = cfg.n_periods * cfg.steps_per_update
    return ClosedLoopTrace(
        controller=cfg.controller,
        times=np.arange(n_tau + 1) * cfg.tau,
        states=np.zeros((n_tau + 1, 4)),
        controls=np.zeros((n_tau, 2)),
        solve_ms=np.zeros(cfg.n_periods),
        batch_ms=np.zeros(cfg.n_periods) if stochastic else None,
        converged=np.zeros(cfg.n_periods, dtype=bool),
        summaries=[] if stochastic else None,
        x2_min=cfg.ocp.x2_min,
        max_nominal_residual=0.0,
        max_snmpc_residual=0.0,
        failures=[],
    )


def _apply_period(trace: ClosedLoopTrace, cfg: SimConfig, k: int, x, u_seq, true_w):
    """Integrate the plant over one control period, recording every tau step."""
    spu = cfg.steps_per_update
    for j in range(spu):
        idx = k * spu + j
        u = u_seq[j]
        trace.controls[idx] = u
        try:
            x = model_mod.step(x, u, true_w, cfg.tau, cfg.ocp.substeps, cfg.ocp.consts)
        except IntegrationError as exc:
            trace.failures.append(f"period {k} step {j}: plant integration failed ({exc})")
        trace.states[idx + 1] = x
    return x


def run_nominal(true_w, cfg: SimConfig) -> ClosedLoopTrace:
    """Closed loop with the nominal controller: plans ignore uncertainty."""
    cfg = replace(cfg, controller="nominal")
    trace = _make_trace(cfg, stochastic=False)
    x = np.asarray(cfg.x0, dtype=np.float64).copy()
    trace.states[0] = x
    w_nom = nominal_parameters()
    prev_plan = None
    held = np.zeros((cfg.steps_per_update, 2))
    for k in range(cfg.n_periods):
        warm = shift_warm_start(prev_plan, cfg.steps_per_update) if prev_plan is not None else None
        try:
            rec = solve_nominal(x, w_nom, cfg.ocp, cfg.solver, warm=warm, origin_step=k)
            trace.solve_ms[k] = rec.wall_time * 1e3
            trace.converged[k] = rec.converged
            if rec.converged:
                trace.max_nominal_residual = max(
                    trace.max_nominal_residual, max(0.0, rec.g_star - rec.mu_star)
                )
            prev_plan = rec.u_star
            u_seq = rec.u_star
        except Exception as exc:  # solver failure: hold the previous input
            trace.failures.append(f"period {k}: solve failed ({exc})")
            u_seq = held
        x = _apply_period(trace, cfg, k, x, u_seq, true_w)
        held = np.repeat(u_seq[cfg.steps_per_update - 1: cfg.steps_per_update],
                         cfg.steps_per_update, axis=0)
    return trace


def _solve_batch(x, scenarios, cfg: SimConfig, warm, period: int):
    """Solve the per-scenario problems at the current state, id-ordered."""
    def one(j):
        return solve_nominal(x, scenarios[j], cfg.ocp, cfg.solver, warm=warm, origin_step=period)

    idx = range(len(scenarios))
    if cfg.solve_workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.solve_workers) as pool:
            return list(pool.map(one, idx))
    return [one(j) for j in idx]


def run_stochastic(true_w, cfg: SimConfig, run_id: int = 0) -> ClosedLoopTrace:
    """Closed loop with the cluster-scenario stochastic controller.

    Every control period: draw fresh scenarios on the buffer-feed stream,
    solve them in parallel at the current state, push the batch into the
    FIFO buffer, cluster the buffer snapshot, solve the cluster-scenario
    problem, and apply its first moves.  Before the first clustering is
    possible the controller falls back to a nominal solve.
    """
    cfg = replace(cfg, controller="stochastic")
    trace = _make_trace(cfg, stochastic=True)
    x = np.asarray(cfg.x0, dtype=np.float64).copy()
    trace.states[0] = x
    w_nom = nominal_parameters()

    def check_record(rec: SolveRecord) -> bool:
        ev = ocp_mod.evaluate(rec.x_origin, rec.u_star, rec.w, cfg.ocp)
        return abs(ev.J - rec.J_star) <= 1e-6 * max(1.0, abs(ev.J))

    buf = FifoBuffer(cfg.N_n, cfg.q, record_check=check_record)
    prev_plan = None
    held = np.zeros((cfg.steps_per_update, 2))
    import time as _time

    for k in range(cfg.n_periods):
        warm = shift_warm_start(prev_plan, cfg.steps_per_update) if prev_plan is not None else None
        try:
            scenarios = draw(cfg.sampler, (STREAM_BUFFER, run_id, k), cfg.N_n)
            t0 = _time.perf_counter()
            batch = _solve_batch(x, scenarios, cfg, warm, k)
            trace.batch_ms[k] = (_time.perf_counter() - t0) * 1e3
            for rec in batch:
                if rec.converged:
                    trace.max_nominal_residual = max(
                        trace.max_nominal_residual, max(0.0, rec.g_star - rec.mu_star)
                    )
            try:
                buf.insert_batch(batch)
            except BadBatch as exc:
                trace.failures.append(f"period {k}: batch rejected ({exc})")
        except Exception as exc:
            trace.failures.append(f"period {k}: scenario batch failed ({exc})")

        u_seq = None
        try:
            records = buf.snapshot() if len(buf) > 0 else ()
            if len(records) >= cfg.clustering.n_cl:
                ccfg = replace(
                    cfg.clustering,
                    seed=derive_seed(cfg.sampler.seed, STREAM_CLUSTER, run_id, k),
                )
                summary = cluster_records(records, ccfg)
                problem = SnmpcProblem(x=x, summary=summary, cfg=cfg.snmpc, cfg_ocp=cfg.ocp)
                sol = solve_snmpc(problem, cfg.solver, warm=warm)
                trace.solve_ms[k] = sol.wall_time * 1e3
                trace.converged[k] = sol.converged
                trace.summaries.append(summary)
                infl = cfg.snmpc.constraint_inflation * np.sqrt(summary.sigma_g)
                trace.max_snmpc_residual = max(
                    trace.max_snmpc_residual,
                    float(np.max(np.maximum(0.0, sol.per_cluster_g + infl - sol.mu_star))),
                )
                prev_plan = sol.u_star
                u_seq = sol.u_star
            else:  # cold start: no clustering data yet
                rec = solve_nominal(x, w_nom, cfg.ocp, cfg.solver, warm=warm, origin_step=k)
                trace.solve_ms[k] = rec.wall_time * 1e3
                trace.converged[k] = rec.converged
                trace.summaries.append(None)
                prev_plan = rec.u_star
                u_seq = rec.u_star
        except Exception as exc:
            trace.failures.append(f"period {k}: solve failed ({exc})")
            trace.summaries.append(None)
            u_seq = held

        x = _apply_period(trace, cfg, k, x, u_seq, true_w)
        held = np.repeat(u_seq[cfg.steps_per_update - 1: cfg.steps_per_update],
                         cfg.steps_per_update, axis=0)
    return trace


def run(true_w, cfg: SimConfig, run_id: int = 0) -> ClosedLoopTrace:
    if cfg.controller == "nominal":
        return run_nominal(true_w, cfg)
    return run_stochastic(true_w, cfg, run_id=run_id)


def write_trace(trace: ClosedLoopTrace, path) -> None:
    """Columnar trace file, one row per tau step."""
    spu_rows = trace.controls.shape[0]
    n_periods = trace.solve_ms.shape[0]
    spu = spu_rows // max(1, n_periods) if n_periods else 1
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("time,x1,x2,x3,x4,u1,u2,solve_ms,converged\n")
        for j in range(spu_rows):
            k = min(j // spu, n_periods - 1) if n_periods else 0
            row = [
                repr(float(trace.times[j])),
                *(repr(float(v)) for v in trace.states[j]),
                *(repr(float(v)) for v in trace.controls[j]),
                repr(float(trace.solve_ms[k])) if n_periods else "0.0",
                str(int(trace.converged[k])) if n_periods else "0",
            ]
            fh.write(",".join(row) + "\n")
