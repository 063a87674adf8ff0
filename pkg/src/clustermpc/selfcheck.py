"""Built-in property checks behind the `clustermpc selftest` command.

Each check prints one PASS/FAIL line; the full pytest suite covers the same
ground (and much more), but these run without any test dependencies.
"""

from __future__ import annotations

import numpy as np

from . import clustering, model, ocp, sampling, solver
from .buffer import FifoBuffer
from .snmpc import SnmpcConfig, SnmpcProblem, solve_snmpc


def _check_rk4_order() -> tuple[bool, str]:
    x0 = np.array([0.8, 0.3, 0.5, 0.7])
    u = np.array([1.0, 0.3])
    w = model.nominal_parameters()
    fine = model.step(x0, u, w, 1.0, 256)
    e = []
    for s in (4, 8):
        e.append(np.linalg.norm(model.step(x0, u, w, 1.0, s) - fine))
    factor = e[0] / e[1]
    return 12.0 <= factor <= 20.0, f"substep-doubling error factor {factor:.1f}"


def _check_gradient() -> tuple[bool, str]:
    cfg = ocp.OcpConfig()
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(5):
        x = rng.uniform([0.2, 0.08, 0.0, 0.2], [1.5, 0.5, 0.5, 1.5])
        u = rng.uniform([0.1, 0.05], [4.9, 0.95], size=(cfg.N, 2))
        w = sampling.draw(sampling.SamplerConfig(seed=int(rng.integers(1 << 30))), 0, 1)[0]
        dJ, _ = ocp.gradient(x, u, w, cfg)
        fd = np.empty_like(dJ)
        h = 1e-5
        for i in range(cfg.N):
            for j in range(2):
                up = u.copy(); up[i, j] += h
                um = u.copy(); um[i, j] -= h
                fd[i, j] = (ocp.evaluate(x, up, w, cfg).J - ocp.evaluate(x, um, w, cfg).J) / (2 * h)
        worst = max(worst, np.linalg.norm(fd - dJ) / max(np.linalg.norm(fd), 1e-12))
    return worst < 1e-3, f"worst relative gradient error {worst:.2e}"


def _check_solver() -> tuple[bool, str]:
    c = np.array([0.3, -2.0, 1.4])
    prob = solver.NlpProblem(
        objective=lambda z: (0.5 * float((z - c) @ (z - c)), z - c),
        lower=np.array([-1.0, -1.0, -1.0]),
        upper=np.array([1.0, 1.0, 1.0]),
    )
    res = solver.solve(prob, np.zeros(3), solver.SolverConfig())
    ok = res.converged and np.allclose(res.z_star, np.clip(c, -1, 1), atol=1e-6)

    def rosen(z):
        a, b = z
        val = (1 - a) ** 2 + 100 * (b - a * a) ** 2
        grad = np.array([-2 * (1 - a) - 400 * a * (b - a * a), 200 * (b - a * a)])
        return val, grad

    prob2 = solver.NlpProblem(objective=rosen, lower=np.array([-2.0, -2.0]),
                              upper=np.array([2.0, 2.0]))
    res2 = solver.solve(prob2, np.array([-1.2, 1.0]), solver.SolverConfig(max_iter=500))
    ok2 = np.allclose(res2.z_star, [1.0, 1.0], atol=1e-4)
    return ok and ok2, f"quadratic converged={res.converged}, rosenbrock at {res2.z_star.round(5)}"


def _check_sampler() -> tuple[bool, str]:
    cfg = sampling.SamplerConfig(sigma=0.2, seed=42)
    ws = sampling.draw(cfg, 0, 10_000)
    mult = ws / model.NOMINAL_PARAMS
    mean_err = float(np.abs(mult.mean(axis=0) - 1.0).max())
    std_err = float(np.abs(mult.std(axis=0) - 0.2).max())
    same = np.array_equal(ws, sampling.draw(cfg, 0, 10_000))
    ok = mean_err < 0.01 and std_err < 0.01 and same and np.all(ws > 0)
    return ok, f"mean dev {mean_err:.4f}, std dev {std_err:.4f}, reproducible={same}"


def _check_buffer() -> tuple[bool, str]:
    def rec(step):
        return solver.SolveRecord(
            w=np.ones(13), u_star=np.zeros((10, 2)), J_star=0.0, g_star=-1.0,
            mu_star=0.0, origin_step=step, converged=True, x_origin=np.zeros(4),
            wall_time=0.0, iterations=0,
        )
    buf = FifoBuffer(batch_size=3, max_batches=2)
    buf.insert_batch([rec(0)] * 3)
    warm = len(buf) == 3
    buf.insert_batch([rec(1)] * 3)
    buf.insert_batch([rec(2)] * 3)
    steps = {r.origin_step for r in buf.snapshot()}
    ok = warm and len(buf) == 6 and steps == {1, 2}
    return ok, f"post-eviction origin steps {sorted(steps)}"


def _check_kmeans() -> tuple[bool, str]:
    rng = np.random.default_rng(3)
    centers = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
    pts = np.vstack([c + 0.05 * rng.standard_normal((8, 2)) for c in centers])
    res = clustering.kmeans_full(pts, clustering.ClusteringConfig(n_cl=3, seed=1))
    planted = np.repeat([1, 2, 3], 8)
    recovered = len({tuple(res.labels[planted == i]) for i in (1, 2, 3)}) == 3 and all(
        len(set(res.labels[planted == i])) == 1 for i in (1, 2, 3)
    )
    monotone = all(
        all(h[i + 1] <= h[i] + 1e-9 for i in range(len(h) - 1))
        for h in res.inertia_histories
    )
    return recovered and monotone, f"recovered={recovered}, inertia monotone={monotone}"


def _check_snmpc_degeneracy() -> tuple[bool, str]:
    cfg_ocp = ocp.OcpConfig()
    cfg_solver = solver.SolverConfig()
    x = np.array([1.0, 0.4, 0.0, 1.0])  # lymphocyte floor comfortably inactive
    w = model.nominal_parameters()
    rec = solver.solve_nominal(x, w, cfg_ocp, cfg_solver)
    summary = clustering.ClusterSummary(
        w_centers=w.reshape(1, -1), p=np.array([1.0]), sigma_J=np.zeros(1),
        sigma_g=np.zeros(1), member_count=np.array([1]),
    )
    sol = solve_snmpc(SnmpcProblem(x=x, summary=summary, cfg=SnmpcConfig(), cfg_ocp=cfg_ocp),
                      cfg_solver)
    dev = float(np.max(np.abs(sol.u_star - rec.u_star)))
    return dev < 1e-3, f"max control deviation {dev:.2e}"


CHECKS = (
    ("rk4 order", _check_rk4_order),
    ("cost gradient vs finite differences", _check_gradient),
    ("box solver", _check_solver),
    ("scenario sampler", _check_sampler),
    ("fifo buffer", _check_buffer),
    ("supervised k-means", _check_kmeans),
    ("single-cluster degeneracy", _check_snmpc_degeneracy),
)


def run_selftest() -> bool:
    all_ok = True
    for name, check in CHECKS:
        try:
            ok, detail = check()
        except Exception as exc:
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        all_ok &= ok
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return all_ok
