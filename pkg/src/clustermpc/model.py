"""Normalized combined-therapy dynamics and fixed-step integration.

State vector (normalized, dimensionless):

    x1  tumor cell population        (raw cells / 1e9)
    x2  circulating lymphocytes      (raw cells / 1e9)
    x3  chemotherapy drug concentration
    x4  effector immune cells        (raw cells / 1e9)

Controls: u1 immune-cell introduction rate in [0, 5], u2 chemotherapy
introduction rate in [0, 1].  The 13 uncertain model parameters live in a
flat positive vector; see PARAM_NAMES for the layout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels

PARAM_NAMES = (
    "a", "b", "c1", "k3", "delta", "k2", "s2", "gamma0", "g", "r", "p0", "k1", "s1",
)

#: nominal parameter values (same layout as PARAM_NAMES), units of 1/day,
#: 1/cell, 1/(cell day) or cell/day as appropriate for the raw dynamics
NOMINAL_PARAMS = np.array([
    0.25,      # a
    1.02e-14,  # b
    4.41e-10,  # c1
    0.6,       # k3
    1.2e-2,    # delta
    0.6,       # k2
    7.5e6,     # s2
    0.9,       # gamma0
    1.5e-2,    # g
    4.0e-2,    # r
    2e-11,     # p0
    0.8,       # k1
    1.2e7,     # s1
])

U_LOWER = np.array([0.0, 0.0])
U_UPPER = np.array([5.0, 1.0])


class IntegrationError(RuntimeError):
    """A rollout produced a non-finite intermediate state."""


@dataclass(frozen=True)
class ModelConstants:
    """Certain constants: immune-recruitment saturation h and the reference
    state used for normalization.  h carries raw-population units, so the
    saturation term compares it against the un-normalized tumor size."""

    h: float = 2.02e1
    xbar: np.ndarray = field(default_factory=lambda: np.array([1e9, 1e9, 1.0, 1e9]))

    def __post_init__(self):
        if self.h <= 0:
            raise ValueError("h must be positive")
        if np.any(np.asarray(self.xbar) <= 0):
            raise ValueError("reference state must be strictly positive")


DEFAULT_CONSTANTS = ModelConstants()


def nominal_parameters() -> np.ndarray:
    """Return a fresh copy of the 13 nominal parameter values."""
    return NOMINAL_PARAMS.copy()


def derivative(x, u, w, consts: ModelConstants = DEFAULT_CONSTANTS) -> np.ndarray:
    """Time derivative of the normalized state.

    Raises IntegrationError when the result is non-finite, which signals a
    parameter or state blow-up rather than a programming error.
    """
    out = np.empty(4)
    _kernels._rhs(
        np.asarray(x, dtype=np.float64),
        np.asarray(u, dtype=np.float64),
        np.asarray(w, dtype=np.float64),
        consts.h,
        np.asarray(consts.xbar, dtype=np.float64),
        out,
    )
    if not np.all(np.isfinite(out)):
        raise IntegrationError("non-finite state derivative")
    return out


def step(x, u, w, dt: float, substeps: int = 4,
         consts: ModelConstants = DEFAULT_CONSTANTS) -> np.ndarray:
    """Advance one control interval with classical RK4.

    The control is held constant over [0, dt]; ``substeps`` internal steps
    are taken and the state is clamped at zero after each one (populations
    and concentrations are physically non-negative).
    """
    if dt < 0:
        raise ValueError("dt must be non-negative")
    if dt == 0:
        return np.asarray(x, dtype=np.float64).copy()
    if substeps < 1:
        raise ValueError("substeps must be a positive integer")
    useq = np.asarray(u, dtype=np.float64).reshape(1, 2)
    traj, ok = _kernels.rollout(
        np.asarray(x, dtype=np.float64),
        useq,
        np.asarray(w, dtype=np.float64),
        consts.h,
        np.asarray(consts.xbar, dtype=np.float64),
        dt,
        substeps,
    )
    if not ok:
        raise IntegrationError("non-finite intermediate state during RK4 step")
    return traj[1].copy()


def params_as_dict(w) -> dict:
    """Name -> value view of a parameter vector, for logging."""
    w = np.asarray(w)
    return {name: float(w[i]) for i, name in enumerate(PARAM_NAMES)}
