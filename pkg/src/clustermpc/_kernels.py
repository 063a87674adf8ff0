"""Compiled numerical kernels: dynamics right-hand side, clamped RK4 rollout,
and the exact discrete adjoint of the rollout used for objective gradients.

Everything here operates on plain float64 arrays so the hot loops stay inside
numba-compiled code.  Parameter vector layout (13 entries, all positive):

    w = [a, b, c1, k3, delta, k2, s2, gamma0, g, r, p0, k1, s1]

States are normalized: raw populations equal ``xbar * x`` componentwise.
"""

from __future__ import annotations

import numpy as np
from numba import njit

#: indices into the parameter vector
W_A, W_B, W_C1, W_K3, W_DELTA, W_K2, W_S2, W_GAMMA0, W_G, W_R, W_P0, W_K1, W_S1 = range(13)


@njit(cache=True, nogil=True, inline="always")
def _rhs(x, u, w, h_sat, xbar, out):
    """Normalized state rate; writes into ``out`` (length 4)."""
    b1 = xbar[0]
    b2 = xbar[1]
    b3 = xbar[2]
    b4 = xbar[3]
    x1 = x[0]
    x2 = x[1]
    x3 = x[2]
    x4 = x[3]
    raw1 = b1 * x1
    sat = raw1 / (h_sat + raw1)
    out[0] = w[W_A] * x1 * (1.0 - w[W_B] * raw1) - (w[W_C1] * b4) * x4 * x1 - w[W_K3] * (b3 * x3) * x1
    out[1] = -w[W_DELTA] * x2 - w[W_K2] * (b3 * x3) * x2 + w[W_S2] / b2
    out[2] = (-w[W_GAMMA0] * (b3 * x3) + u[1]) / b3
    out[3] = (
        w[W_G] * sat * x4
        - w[W_R] * x4
        - (w[W_P0] * b1) * x1 * x4
        - w[W_K1] * (b3 * x3) * x4
        + (w[W_S1] / b4) * u[0]
    )


@njit(cache=True, nogil=True, inline="always")
def _rhs_vjp_x(x, w, h_sat, xbar, v, out):
    """out = (d rhs / d x)^T v evaluated at state ``x`` (control-independent)."""
    b1 = xbar[0]
    b3 = xbar[2]
    b4 = xbar[3]
    x1 = x[0]
    x2 = x[1]
    x3 = x[2]
    x4 = x[3]
    raw1 = b1 * x1
    denom = h_sat + raw1
    sat = raw1 / denom
    dsat = b1 * h_sat / (denom * denom)
    c1b = w[W_C1] * b4
    p0b = w[W_P0] * b1
    # Jacobian entries (row = equation, col = state)
    a11 = w[W_A] * (1.0 - 2.0 * w[W_B] * raw1) - c1b * x4 - w[W_K3] * b3 * x3
    a13 = -w[W_K3] * b3 * x1
    a14 = -c1b * x1
    a22 = -w[W_DELTA] - w[W_K2] * b3 * x3
    a23 = -w[W_K2] * b3 * x2
    a33 = -w[W_GAMMA0]
    a41 = w[W_G] * dsat * x4 - p0b * x4
    a43 = -w[W_K1] * b3 * x4
    a44 = w[W_G] * sat - w[W_R] - p0b * x1 - w[W_K1] * b3 * x3
    out[0] = a11 * v[0] + a41 * v[3]
    out[1] = a22 * v[1]
    out[2] = a13 * v[0] + a23 * v[1] + a33 * v[2] + a43 * v[3]
    out[3] = a14 * v[0] + a44 * v[3]


@njit(cache=True, nogil=True)
def rollout(x0, useq, w, h_sat, xbar, tau, substeps):
    """Roll the dynamics over ``useq`` with RK4, clamping states at zero.

    Returns (traj, ok): traj has shape (N+1, 4); ok is False when a
    non-finite intermediate state was produced (traj is then invalid).
    """
    n = useq.shape[0]
    traj = np.empty((n + 1, 4))
    x = np.empty(4)
    k1 = np.empty(4)
    k2 = np.empty(4)
    k3 = np.empty(4)
    k4 = np.empty(4)
    xs = np.empty(4)
    for j in range(4):
        x[j] = x0[j]
        traj[0, j] = x0[j]
    dt = tau / substeps
    for i in range(n):
        u = useq[i]
        for _ in range(substeps):
            _rhs(x, u, w, h_sat, xbar, k1)
            for j in range(4):
                xs[j] = x[j] + 0.5 * dt * k1[j]
            _rhs(xs, u, w, h_sat, xbar, k2)
            for j in range(4):
                xs[j] = x[j] + 0.5 * dt * k2[j]
            _rhs(xs, u, w, h_sat, xbar, k3)
            for j in range(4):
                xs[j] = x[j] + dt * k3[j]
            _rhs(xs, u, w, h_sat, xbar, k4)
            finite = True
            for j in range(4):
                v = x[j] + (dt / 6.0) * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])
                if v < 0.0:
                    v = 0.0
                if not np.isfinite(v):
                    finite = False
                x[j] = v
            if not finite:
                return traj, False
        for j in range(4):
            traj[i + 1, j] = x[j]
    return traj, True


@njit(cache=True, nogil=True, inline="always")
def _softmin_weights(x2_nodes, rho_s, alpha):
    """Softmax weights of -x2/rho_s (stable); returns log-sum-exp surplus.

    ``alpha[i]`` is the weight of node i; the soft minimum equals
    ``min(x2) - rho_s * log(sum exp((min - x2_i)/rho_s))``.
    """
    n = x2_nodes.shape[0]
    m = x2_nodes[0]
    for i in range(1, n):
        if x2_nodes[i] < m:
            m = x2_nodes[i]
    total = 0.0
    for i in range(n):
        alpha[i] = np.exp((m - x2_nodes[i]) / rho_s)
        total += alpha[i]
    for i in range(n):
        alpha[i] /= total
    return m - rho_s * np.log(total)


@njit(cache=True, nogil=True)
def eval_ocp(x0, useq, w, h_sat, xbar, tau, substeps, rho_f, rho_u, x2_min, rho_s):
    """Finite-horizon cost and constraint indicators along one rollout.

    The cost is the terminal tumor term plus the tau-weighted running sum
    (an integral-style discretization):

        J = rho_f * x1(N) + sum_{i=1..N} tau * [ x1(i) + rho_u * |u(i)|_1 ]

    Returns (J, g_hard, g_smooth, traj, ok).  g follows the canonical
    ``g <= 0`` convention: g_hard = x2_min - min_i x2(i) over i = 1..N,
    and g_smooth replaces the hard min by a soft minimum with sharpness
    rho_s (g_smooth >= g_hard always).
    """
    traj, ok = rollout(x0, useq, w, h_sat, xbar, tau, substeps)
    n = useq.shape[0]
    if not ok:
        return np.nan, np.nan, np.nan, traj, False
    cost = rho_f * traj[n, 0]
    for i in range(1, n + 1):
        cost += tau * traj[i, 0]
    for i in range(n):
        cost += tau * rho_u * (abs(useq[i, 0]) + abs(useq[i, 1]))
    alpha = np.empty(n)
    x2_nodes = np.empty(n)
    for i in range(n):
        x2_nodes[i] = traj[i + 1, 1]
    softmin = _softmin_weights(x2_nodes, rho_s, alpha)
    hardmin = x2_nodes[0]
    for i in range(1, n):
        if x2_nodes[i] < hardmin:
            hardmin = x2_nodes[i]
    return cost, x2_min - hardmin, x2_min - softmin, traj, True


@njit(cache=True, nogil=True)
def eval_ocp_penalized(x0, useq, w, h_sat, xbar, tau, substeps, rho_f, rho_u,
                       x2_min, cost_weight, offset, mu, penalty, nus, forced):
    """Fused value+gradient of the penalty-folded objective for one scenario:

        value = cost_weight * J(u)
                + sum_i penalty * max(0, nus[i]/(2*penalty)
                                         + x2_min + offset - x2(i) - mu)^2

    i.e. the horizon cost plus per-node quadratic hinge penalties on the
    lymphocyte floor (augmented by the multiplier estimates ``nus`` and an
    additive constraint ``offset``, which carries the cluster dispersion
    inflation).  One adjoint chain computes the gradient of the whole sum.

    ``forced[i]`` overrides node i's hinge: +1 keeps the quadratic active on
    both branches, -1 removes it, 0 leaves the plain hinge.  Freezing the
    active set this way makes the objective smooth, which is how the final
    polish escapes the hinge kinks.

    Returns (value, J, g_hard, dval_du, dval_dmu, ok); dval_dmu covers only
    the penalty part (the caller adds the slack price).
    """
    n = useq.shape[0]
    dt = tau / substeps
    traj = np.empty((n + 1, 4))
    stages = np.empty((n, substeps, 4, 4))
    masks = np.empty((n, substeps, 4))
    x = np.empty(4)
    k1 = np.empty(4)
    k2 = np.empty(4)
    k3 = np.empty(4)
    k4 = np.empty(4)
    dval = np.zeros((n, 2))
    for j in range(4):
        x[j] = x0[j]
        traj[0, j] = x0[j]

    for i in range(n):
        u = useq[i]
        for s in range(substeps):
            for j in range(4):
                stages[i, s, 0, j] = x[j]
            _rhs(x, u, w, h_sat, xbar, k1)
            for j in range(4):
                stages[i, s, 1, j] = x[j] + 0.5 * dt * k1[j]
            _rhs(stages[i, s, 1], u, w, h_sat, xbar, k2)
            for j in range(4):
                stages[i, s, 2, j] = x[j] + 0.5 * dt * k2[j]
            _rhs(stages[i, s, 2], u, w, h_sat, xbar, k3)
            for j in range(4):
                stages[i, s, 3, j] = x[j] + dt * k3[j]
            _rhs(stages[i, s, 3], u, w, h_sat, xbar, k4)
            finite = True
            for j in range(4):
                v = x[j] + (dt / 6.0) * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])
                if v < 0.0:
                    v = 0.0
                    masks[i, s, j] = 0.0
                else:
                    masks[i, s, j] = 1.0
                if not np.isfinite(v):
                    finite = False
                x[j] = v
            if not finite:
                return np.nan, np.nan, np.nan, dval, np.nan, False

        for j in range(4):
            traj[i + 1, j] = x[j]

    cost = rho_f * traj[n, 0]
    for i in range(1, n + 1):
        cost += tau * traj[i, 0]
    for i in range(n):
        cost += tau * rho_u * (abs(useq[i, 0]) + abs(useq[i, 1]))

    hardmin = traj[1, 1]
    for i in range(2, n + 1):
        if traj[i, 1] < hardmin:
            hardmin = traj[i, 1]
    g_hard = x2_min - hardmin

    # per-node hinge penalties and their x2 seeds
    value = cost_weight * cost
    dval_dmu = 0.0
    seeds2 = np.zeros(n)
    for i in range(n):
        r = nus[i] / (2.0 * penalty) + x2_min + offset - traj[i + 1, 1] - mu
        if forced[i] > 0.0 or (forced[i] == 0.0 and r > 0.0):
            value += penalty * r * r
            seeds2[i] = -2.0 * penalty * r
            dval_dmu -= 2.0 * penalty * r

    lam = np.zeros(4)
    bk = np.empty(4)
    bs = np.empty(4)
    acc = np.empty(4)
    for i in range(n - 1, -1, -1):
        lam[0] += cost_weight * (tau + (rho_f if i == n - 1 else 0.0))
        lam[1] += seeds2[i]
        for s in range(substeps - 1, -1, -1):
            for j in range(4):
                lam[j] *= masks[i, s, j]
                acc[j] = lam[j]
            for j in range(4):
                bk[j] = (dt / 6.0) * lam[j]
            _rhs_vjp_x(stages[i, s, 3], w, h_sat, xbar, bk, bs)
            dval[i, 0] += (w[W_S1] / xbar[3]) * bk[3]
            dval[i, 1] += bk[2] / xbar[2]
            for j in range(4):
                acc[j] += bs[j]
                bk[j] = (dt / 3.0) * lam[j] + dt * bs[j]
            _rhs_vjp_x(stages[i, s, 2], w, h_sat, xbar, bk, bs)
            dval[i, 0] += (w[W_S1] / xbar[3]) * bk[3]
            dval[i, 1] += bk[2] / xbar[2]
            for j in range(4):
                acc[j] += bs[j]
                bk[j] = (dt / 3.0) * lam[j] + 0.5 * dt * bs[j]
            _rhs_vjp_x(stages[i, s, 1], w, h_sat, xbar, bk, bs)
            dval[i, 0] += (w[W_S1] / xbar[3]) * bk[3]
            dval[i, 1] += bk[2] / xbar[2]
            for j in range(4):
                acc[j] += bs[j]
                bk[j] = (dt / 6.0) * lam[j] + 0.5 * dt * bs[j]
            _rhs_vjp_x(stages[i, s, 0], w, h_sat, xbar, bk, bs)
            dval[i, 0] += (w[W_S1] / xbar[3]) * bk[3]
            dval[i, 1] += bk[2] / xbar[2]
            for j in range(4):
                lam[j] = acc[j] + bs[j]
        dval[i, 0] += cost_weight * tau * rho_u * (1.0 if useq[i, 0] >= 0.0 else -1.0)
        dval[i, 1] += cost_weight * tau * rho_u * (1.0 if useq[i, 1] >= 0.0 else -1.0)

    return value, cost, g_hard, dval, dval_dmu, True


@njit(cache=True, nogil=True)
def node_sensitivities(x0, useq, w, h_sat, xbar, tau, substeps, rho_f, rho_u):
    """Cost gradient plus the full per-node lymphocyte sensitivity block.

    Returns (J, dJ_du (N,2), x2_nodes (N,), G (N,N,2), traj, ok) where
    G[i] = d x2(node i+1) / d useq.  One forward pass with stage storage,
    then one adjoint chain for the cost and one per trajectory node (chain i
    only spans intervals up to i).  Used by the Gauss-Newton polish, which
    needs the exact curvature structure of the active floor penalties.
    """
    n = useq.shape[0]
    dt = tau / substeps
    traj = np.empty((n + 1, 4))
    stages = np.empty((n, substeps, 4, 4))
    masks = np.empty((n, substeps, 4))
    x = np.empty(4)
    k1 = np.empty(4)
    k2 = np.empty(4)
    k3 = np.empty(4)
    k4 = np.empty(4)
    dJ = np.zeros((n, 2))
    G = np.zeros((n, n, 2))
    x2_nodes = np.empty(n)
    for j in range(4):
        x[j] = x0[j]
        traj[0, j] = x0[j]

    for i in range(n):
        u = useq[i]
        for s in range(substeps):
            for j in range(4):
                stages[i, s, 0, j] = x[j]
            _rhs(x, u, w, h_sat, xbar, k1)
            for j in range(4):
                stages[i, s, 1, j] = x[j] + 0.5 * dt * k1[j]
            _rhs(stages[i, s, 1], u, w, h_sat, xbar, k2)
            for j in range(4):
                stages[i, s, 2, j] = x[j] + 0.5 * dt * k2[j]
            _rhs(stages[i, s, 2], u, w, h_sat, xbar, k3)
            for j in range(4):
                stages[i, s, 3, j] = x[j] + dt * k3[j]
            _rhs(stages[i, s, 3], u, w, h_sat, xbar, k4)
            finite = True
            for j in range(4):
                v = x[j] + (dt / 6.0) * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])
                if v < 0.0:
                    v = 0.0
                    masks[i, s, j] = 0.0
                else:
                    masks[i, s, j] = 1.0
                if not np.isfinite(v):
                    finite = False
                x[j] = v
            if not finite:
                return np.nan, dJ, x2_nodes, G, traj, False
        for j in range(4):
            traj[i + 1, j] = x[j]
        x2_nodes[i] = traj[i + 1, 1]

    cost = rho_f * traj[n, 0]
    for i in range(1, n + 1):
        cost += tau * traj[i, 0]
    for i in range(n):
        cost += tau * rho_u * (abs(useq[i, 0]) + abs(useq[i, 1]))

    lam = np.empty(4)
    bk = np.empty(4)
    bs = np.empty(4)
    acc = np.empty(4)
    s1n = w[W_S1] / xbar[3]
    # chain c = 0 carries the cost seeds; chain c >= 1 carries node c-1
    for c in range(n + 1):
        for j in range(4):
            lam[j] = 0.0
        if c >= 1:
            lam[1] = 1.0  # seed at node c-1, swept from its interval down
            start = c - 1
        else:
            start = n - 1
        for i in range(start, -1, -1):
            if c == 0:
                lam[0] += tau + (rho_f if i == n - 1 else 0.0)
            for s in range(substeps - 1, -1, -1):
                for j in range(4):
                    lam[j] *= masks[i, s, j]
                    acc[j] = lam[j]
                for j in range(4):
                    bk[j] = (dt / 6.0) * lam[j]
                _rhs_vjp_x(stages[i, s, 3], w, h_sat, xbar, bk, bs)
                du0 = s1n * bk[3]
                du1 = bk[2] / xbar[2]
                for j in range(4):
                    acc[j] += bs[j]
                    bk[j] = (dt / 3.0) * lam[j] + dt * bs[j]
                _rhs_vjp_x(stages[i, s, 2], w, h_sat, xbar, bk, bs)
                du0 += s1n * bk[3]
                du1 += bk[2] / xbar[2]
                for j in range(4):
                    acc[j] += bs[j]
                    bk[j] = (dt / 3.0) * lam[j] + 0.5 * dt * bs[j]
                _rhs_vjp_x(stages[i, s, 1], w, h_sat, xbar, bk, bs)
                du0 += s1n * bk[3]
                du1 += bk[2] / xbar[2]
                for j in range(4):
                    acc[j] += bs[j]
                    bk[j] = (dt / 6.0) * lam[j] + 0.5 * dt * bs[j]
                _rhs_vjp_x(stages[i, s, 0], w, h_sat, xbar, bk, bs)
                du0 += s1n * bk[3]
                du1 += bk[2] / xbar[2]
                for j in range(4):
                    lam[j] = acc[j] + bs[j]
                if c == 0:
                    dJ[i, 0] += du0
                    dJ[i, 1] += du1
                else:
                    G[c - 1, i, 0] += du0
                    G[c - 1, i, 1] += du1
            if c == 0:
                dJ[i, 0] += tau * rho_u * (1.0 if useq[i, 0] >= 0.0 else -1.0)
                dJ[i, 1] += tau * rho_u * (1.0 if useq[i, 1] >= 0.0 else -1.0)

    return cost, dJ, x2_nodes, G, traj, True


@njit(cache=True, nogil=True)
def eval_ocp_grad(x0, useq, w, h_sat, xbar, tau, substeps, rho_f, rho_u, x2_min, rho_s):
    """Cost/constraint evaluation plus exact gradients of J and g_smooth.

    The gradient is the discrete adjoint of the clamped-RK4 rollout: the
    reverse sweep replays the stored stage states, so it differentiates
    exactly what the forward pass computed (clamp treated as identity on
    the closed half-line x >= 0).

    Returns (J, g_hard, g_smooth, dJ_du, dGs_du, traj, ok) with the
    gradients shaped (N, 2).
    """
    n = useq.shape[0]
    dt = tau / substeps
    traj = np.empty((n + 1, 4))
    stages = np.empty((n, substeps, 4, 4))  # stage input states s1..s4
    masks = np.empty((n, substeps, 4))  # 0 where the zero-clamp was binding
    x = np.empty(4)
    k1 = np.empty(4)
    k2 = np.empty(4)
    k3 = np.empty(4)
    k4 = np.empty(4)
    dJ = np.zeros((n, 2))
    dG = np.zeros((n, 2))
    for j in range(4):
        x[j] = x0[j]
        traj[0, j] = x0[j]

    for i in range(n):
        u = useq[i]
        for s in range(substeps):
            for j in range(4):
                stages[i, s, 0, j] = x[j]
            _rhs(x, u, w, h_sat, xbar, k1)
            for j in range(4):
                stages[i, s, 1, j] = x[j] + 0.5 * dt * k1[j]
            _rhs(stages[i, s, 1], u, w, h_sat, xbar, k2)
            for j in range(4):
                stages[i, s, 2, j] = x[j] + 0.5 * dt * k2[j]
            _rhs(stages[i, s, 2], u, w, h_sat, xbar, k3)
            for j in range(4):
                stages[i, s, 3, j] = x[j] + dt * k3[j]
            _rhs(stages[i, s, 3], u, w, h_sat, xbar, k4)
            finite = True
            for j in range(4):
                v = x[j] + (dt / 6.0) * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])
                if v < 0.0:
                    v = 0.0
                    masks[i, s, j] = 0.0
                else:
                    masks[i, s, j] = 1.0
                if not np.isfinite(v):
                    finite = False
                x[j] = v
            if not finite:
                return np.nan, np.nan, np.nan, dJ, dG, traj, False
        for j in range(4):
            traj[i + 1, j] = x[j]

    cost = rho_f * traj[n, 0]
    for i in range(1, n + 1):
        cost += tau * traj[i, 0]
    for i in range(n):
        cost += tau * rho_u * (abs(useq[i, 0]) + abs(useq[i, 1]))
    alpha = np.empty(n)
    x2_nodes = np.empty(n)
    for i in range(n):
        x2_nodes[i] = traj[i + 1, 1]
    softmin = _softmin_weights(x2_nodes, rho_s, alpha)
    hardmin = x2_nodes[0]
    for i in range(1, n):
        if x2_nodes[i] < hardmin:
            hardmin = x2_nodes[i]

    # reverse sweep, two adjoint chains at once (cost and soft constraint)
    lam_j = np.zeros(4)
    lam_g = np.zeros(4)
    bk_j = np.empty(4)
    bk_g = np.empty(4)
    bs_j = np.empty(4)
    bs_g = np.empty(4)
    acc_j = np.empty(4)
    acc_g = np.empty(4)
    for i in range(n - 1, -1, -1):
        # seeds at trajectory node i+1
        lam_j[0] += tau + (rho_f if i == n - 1 else 0.0)
        lam_g[1] += -alpha[i]
        for s in range(substeps - 1, -1, -1):
            for j in range(4):
                lam_j[j] *= masks[i, s, j]
                lam_g[j] *= masks[i, s, j]
                acc_j[j] = lam_j[j]
                acc_g[j] = lam_g[j]
            # stage order k4, k3, k2, k1; coefficient of ks in x_raw and the
            # feed of k_{s-1} into stage input s_s
            # bar_k4
            for j in range(4):
                bk_j[j] = (dt / 6.0) * lam_j[j]
                bk_g[j] = (dt / 6.0) * lam_g[j]
            _rhs_vjp_x(stages[i, s, 3], w, h_sat, xbar, bk_j, bs_j)
            _rhs_vjp_x(stages[i, s, 3], w, h_sat, xbar, bk_g, bs_g)
            dJ[i, 0] += (w[W_S1] / xbar[3]) * bk_j[3]
            dJ[i, 1] += bk_j[2] / xbar[2]
            dG[i, 0] += (w[W_S1] / xbar[3]) * bk_g[3]
            dG[i, 1] += bk_g[2] / xbar[2]
            # bar_k3 = (dt/3) lam + dt * bar_s4
            for j in range(4):
                acc_j[j] += bs_j[j]
                acc_g[j] += bs_g[j]
                bk_j[j] = (dt / 3.0) * lam_j[j] + dt * bs_j[j]
                bk_g[j] = (dt / 3.0) * lam_g[j] + dt * bs_g[j]
            _rhs_vjp_x(stages[i, s, 2], w, h_sat, xbar, bk_j, bs_j)
            _rhs_vjp_x(stages[i, s, 2], w, h_sat, xbar, bk_g, bs_g)
            dJ[i, 0] += (w[W_S1] / xbar[3]) * bk_j[3]
            dJ[i, 1] += bk_j[2] / xbar[2]
            dG[i, 0] += (w[W_S1] / xbar[3]) * bk_g[3]
            dG[i, 1] += bk_g[2] / xbar[2]
            # bar_k2 = (dt/3) lam + (dt/2) * bar_s3
            for j in range(4):
                acc_j[j] += bs_j[j]
                acc_g[j] += bs_g[j]
                bk_j[j] = (dt / 3.0) * lam_j[j] + 0.5 * dt * bs_j[j]
                bk_g[j] = (dt / 3.0) * lam_g[j] + 0.5 * dt * bs_g[j]
            _rhs_vjp_x(stages[i, s, 1], w, h_sat, xbar, bk_j, bs_j)
            _rhs_vjp_x(stages[i, s, 1], w, h_sat, xbar, bk_g, bs_g)
            dJ[i, 0] += (w[W_S1] / xbar[3]) * bk_j[3]
            dJ[i, 1] += bk_j[2] / xbar[2]
            dG[i, 0] += (w[W_S1] / xbar[3]) * bk_g[3]
            dG[i, 1] += bk_g[2] / xbar[2]
            # bar_k1 = (dt/6) lam + (dt/2) * bar_s2
            for j in range(4):
                acc_j[j] += bs_j[j]
                acc_g[j] += bs_g[j]
                bk_j[j] = (dt / 6.0) * lam_j[j] + 0.5 * dt * bs_j[j]
                bk_g[j] = (dt / 6.0) * lam_g[j] + 0.5 * dt * bs_g[j]
            _rhs_vjp_x(stages[i, s, 0], w, h_sat, xbar, bk_j, bs_j)
            _rhs_vjp_x(stages[i, s, 0], w, h_sat, xbar, bk_g, bs_g)
            dJ[i, 0] += (w[W_S1] / xbar[3]) * bk_j[3]
            dJ[i, 1] += bk_j[2] / xbar[2]
            dG[i, 0] += (w[W_S1] / xbar[3]) * bk_g[3]
            dG[i, 1] += bk_g[2] / xbar[2]
            for j in range(4):
                lam_j[j] = acc_j[j] + bs_j[j]
                lam_g[j] = acc_g[j] + bs_g[j]
        # effort term: d|u|/du = sign(u), taken as +1 at u = 0 (box keeps u >= 0)
        dJ[i, 0] += tau * rho_u * (1.0 if useq[i, 0] >= 0.0 else -1.0)
        dJ[i, 1] += tau * rho_u * (1.0 if useq[i, 1] >= 0.0 else -1.0)

    return cost, x2_min - hardmin, x2_min - softmin, dJ, dG, traj, True
