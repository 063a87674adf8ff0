"""Finite-horizon open-loop cost and constraint for one parameter scenario.

The cost penalizes the tumor along the horizon and at its end plus a small
control-effort term; the constraint keeps predicted lymphocytes above a
floor, written in canonical ``g <= 0`` form:

    J(u, w) = rho_f * x1(N) + sum_{i=1..N} tau * [ x1(i) + rho_u * |u(i)| ]
    g(u, w) = x2_min - min_{i=1..N} x2(i)

|u(i)| is the 1-norm of the 2-dimensional control; the running terms carry
the step length tau so the sum approximates the integral of x1 + rho_u*|u|
over the horizon.  For gradient purposes a soft minimum (log-sum-exp of
-x2/rho_smooth) replaces the hard min; the hard form is always what gets
reported.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .model import DEFAULT_CONSTANTS, IntegrationError, ModelConstants, U_LOWER, U_UPPER


@dataclass(frozen=True)
class OcpConfig:
    N: int = 10                 # horizon length (control steps)
    tau: float = 0.2            # step duration, days
    rho_f: float = 1000.0       # terminal tumor weight
    rho_u: float = 1.0          # control effort weight
    x2_min: float = 0.05        # lymphocyte floor, normalized
    rho: float = 1e5            # slack price; above the floor's shadow price
    substeps: int = 4           # RK4 substeps per control step
    rho_smooth: float = 1e-3    # soft-min sharpness for the constraint surrogate
    consts: ModelConstants = field(default=DEFAULT_CONSTANTS)

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("horizon must be at least 1")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if min(self.rho_f, self.rho_u, self.rho) < 0:
            raise ValueError("weights must be non-negative")
        if not 0 < self.x2_min < 1:
            raise ValueError("x2_min must lie in (0, 1)")


@dataclass(frozen=True)
class OcpEvaluation:
    J: float
    g: float                    # canonical form: feasible iff g <= 0
    g_smooth: float             # soft-min surrogate, >= g
    trajectory: np.ndarray      # predicted states, shape (N+1, 4)


def check_controls(u, cfg: OcpConfig) -> np.ndarray:
    """Validate shape and box bounds of a control sequence."""
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (cfg.N, 2):
        raise ValueError(f"control sequence must have shape ({cfg.N}, 2), got {u.shape}")
    if np.any(u < U_LOWER - 1e-12) or np.any(u > U_UPPER + 1e-12):
        raise ValueError("control sequence violates the box bounds")
    return u


def evaluate(x, u, w, cfg: OcpConfig) -> OcpEvaluation:
    """Roll the model over the horizon and evaluate cost and constraint."""
    u = np.asarray(u, dtype=np.float64).reshape(cfg.N, 2)
    J, g_hard, g_soft, traj, ok = _kernels.eval_ocp(
        np.asarray(x, dtype=np.float64),
        u,
        np.asarray(w, dtype=np.float64),
        cfg.consts.h,
        np.asarray(cfg.consts.xbar, dtype=np.float64),
        cfg.tau,
        cfg.substeps,
        cfg.rho_f,
        cfg.rho_u,
        cfg.x2_min,
        cfg.rho_smooth,
    )
    if not ok:
        raise IntegrationError("rollout diverged while evaluating the OCP")
    return OcpEvaluation(J=float(J), g=float(g_hard), g_smooth=float(g_soft), trajectory=traj)


def gradient(x, u, w, cfg: OcpConfig):
    """Sensitivities (dJ/du, dg_smooth/du), each shaped (N, 2).

    Computed by the exact discrete adjoint of the RK4 rollout, so they match
    central finite differences of evaluate() wherever the rollout is smooth.
    """
    _, _, _, dJ, dG = evaluate_with_gradient(x, u, w, cfg)
    return dJ, dG


def evaluate_with_gradient(x, u, w, cfg: OcpConfig):
    """(J, g, g_smooth, dJ/du, dg_smooth/du) in one rollout + adjoint sweep."""
    u = np.asarray(u, dtype=np.float64).reshape(cfg.N, 2)
    J, g_hard, g_soft, dJ, dG, _traj, ok = _kernels.eval_ocp_grad(
        np.asarray(x, dtype=np.float64),
        u,
        np.asarray(w, dtype=np.float64),
        cfg.consts.h,
        np.asarray(cfg.consts.xbar, dtype=np.float64),
        cfg.tau,
        cfg.substeps,
        cfg.rho_f,
        cfg.rho_u,
        cfg.x2_min,
        cfg.rho_smooth,
    )
    if not ok:
        raise IntegrationError("rollout diverged while evaluating the OCP")
    return float(J), float(g_hard), float(g_soft), dJ, dG
