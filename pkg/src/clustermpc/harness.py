"""Monte Carlo campaign runner, report emission, and the command line.

A campaign draws one set of true parameter vectors on an evaluation stream
(disjoint from the streams feeding the clustering buffer) and runs every
requested controller against the same set, so the comparison is paired.
Per-run results are reduced in (controller, run_id) order, which makes the
emitted CSVs byte-reproducible for a fixed master seed regardless of how
many workers executed the runs.

Timing lives in timing.csv and summary.json only: wall-clock measurements
are inherently non-deterministic, so keeping them out of runs.csv preserves
byte-identical re-runs of the deterministic tables.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import multiprocessing as mp

import numpy as np

from .clustering import ClusteringConfig
from .ocp import OcpConfig
from .sampling import STREAM_EVAL, SamplerConfig, draw
from .simloop import CONTROLLERS, SimConfig, run, write_trace
from .snmpc import SnmpcConfig
from .solver import SolverConfig

N_HIST_BINS = 40


@dataclass(frozen=True)
class CampaignConfig:
    runs: int = 100
    controllers: tuple = ("nominal", "stochastic")
    master_seed: int = 12345
    outdir: str = "results"
    sim: SimConfig = field(default_factory=SimConfig)

    def __post_init__(self):
        if self.runs < 1:
            raise ValueError("runs must be >= 1")
        for c in self.controllers:
            if c not in CONTROLLERS:
                raise ValueError(f"unknown controller {c!r}")


@dataclass(frozen=True)
class RunResult:
    run_id: int
    controller: str
    terminal_x1: float
    min_x2: float
    violated: bool
    solve_ms: tuple
    converged_fraction: float
    max_nominal_residual: float
    max_snmpc_residual: float
    failed: bool
    error: str = ""


@dataclass
class CampaignReport:
    config: dict
    results: list            # RunResult, ordered by (controller, run_id)
    controllers: tuple

    def _ok(self, controller: str):
        return [r for r in self.results if r.controller == controller and not r.failed]

    def failed_runs(self):
        return [r for r in self.results if r.failed]

    def violation_fraction(self, controller: str) -> float:
        ok = self._ok(controller)
        if not ok:
            return float("nan")
        return sum(r.violated for r in ok) / len(ok)

    def terminal_x1(self, controller: str) -> np.ndarray:
        return np.array([r.terminal_x1 for r in self._ok(controller)])

    def min_x2(self, controller: str) -> np.ndarray:
        return np.array([r.min_x2 for r in self._ok(controller)])

    def solve_times(self, controller: str) -> np.ndarray:
        ok = self._ok(controller)
        if not ok:
            return np.array([])
        return np.concatenate([np.asarray(r.solve_ms) for r in ok])

    def mean_solve_ms(self, controller: str) -> float:
        t = self.solve_times(controller)
        return float(t.mean()) if t.size else float("nan")

    def max_residuals(self, controller: str):
        ok = self._ok(controller)
        if not ok:
            return float("nan"), float("nan")
        return (
            max(r.max_nominal_residual for r in ok),
            max(r.max_snmpc_residual for r in ok),
        )


def _config_to_dict(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: _config_to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, (list, tuple)):
        return [_config_to_dict(v) for v in obj]
    return obj


def campaign_config_to_dict(cfg: CampaignConfig) -> dict:
    return _config_to_dict(cfg)


def campaign_config_from_dict(d: dict) -> CampaignConfig:
    sim = d["sim"]
    ocp_d = dict(sim["ocp"])
    consts_d = ocp_d.pop("consts")
    from .model import ModelConstants

    sim_cfg = SimConfig(
        duration=sim["duration"],
        steps_per_update=sim["steps_per_update"],
        x0=np.asarray(sim["x0"], dtype=np.float64),
        controller=sim["controller"],
        N_n=sim["N_n"],
        q=sim["q"],
        solve_workers=sim["solve_workers"],
        ocp=OcpConfig(consts=ModelConstants(h=consts_d["h"], xbar=np.asarray(consts_d["xbar"])),
                      **ocp_d),
        snmpc=SnmpcConfig(**sim["snmpc"]),
        sampler=SamplerConfig(**sim["sampler"]),
        clustering=ClusteringConfig(**sim["clustering"]),
        solver=SolverConfig(**sim["solver"]),
    )
    return CampaignConfig(
        runs=d["runs"],
        controllers=tuple(d["controllers"]),
        master_seed=d["master_seed"],
        outdir=d["outdir"],
        sim=sim_cfg,
    )


def _run_one(task) -> RunResult:
    controller, run_id, true_w, sim_cfg = task
    try:
        cfg = replace(sim_cfg, controller=controller)
        trace = run(true_w, cfg, run_id=run_id)
        return RunResult(
            run_id=run_id,
            controller=controller,
            terminal_x1=trace.terminal_x1,
            min_x2=trace.min_x2,
            violated=trace.violated,
            solve_ms=tuple(float(v) for v in trace.solve_ms),
            converged_fraction=float(np.mean(trace.converged)) if trace.converged.size else 1.0,
            max_nominal_residual=trace.max_nominal_residual,
            max_snmpc_residual=trace.max_snmpc_residual,
            failed=False,
        )
    except Exception as exc:  # recorded, excluded from aggregates
        return RunResult(
            run_id=run_id,
            controller=controller,
            terminal_x1=float("nan"),
            min_x2=float("nan"),
            violated=False,
            solve_ms=(),
            converged_fraction=0.0,
            max_nominal_residual=0.0,
            max_snmpc_residual=0.0,
            failed=True,
            error=f"{type(exc).__name__}: {exc}",
        )


def run_campaign(cfg: CampaignConfig, workers: int | None = None) -> CampaignReport:
    """Run every requested controller on the same drawn true-parameter set."""
    sampler = replace(cfg.sim.sampler, seed=cfg.master_seed)
    sim_cfg = replace(cfg.sim, sampler=sampler)
    true_ws = draw(sampler, (STREAM_EVAL,), cfg.runs)
    tasks = [
        (controller, run_id, true_ws[run_id], sim_cfg)
        for controller in cfg.controllers
        for run_id in range(cfg.runs)
    ]
    if workers is None:
        workers = min(os.cpu_count() or 1, len(tasks))
    if workers > 1:
        # fork so the already-compiled kernels are inherited by the pool
        ctx = mp.get_context("fork")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
            results = list(pool.map(_run_one, tasks, chunksize=1))
    else:
        results = [_run_one(t) for t in tasks]
    order = {c: i for i, c in enumerate(cfg.controllers)}
    results.sort(key=lambda r: (order[r.controller], r.run_id))
    return CampaignReport(
        config=campaign_config_to_dict(cfg),
        results=results,
        controllers=tuple(cfg.controllers),
    )


def _histogram_rows(values_by_controller: dict) -> list:
    """Shared 40-bin histogram over the observed range of all controllers."""
    all_values = np.concatenate([v for v in values_by_controller.values() if v.size]) \
        if any(v.size for v in values_by_controller.values()) else np.array([])
    rows = []
    if all_values.size == 0:
        return rows
    lo, hi = float(all_values.min()), float(all_values.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, N_HIST_BINS + 1)
    counts = {
        c: np.histogram(v, bins=edges)[0] if v.size else np.zeros(N_HIST_BINS, dtype=int)
        for c, v in values_by_controller.items()
    }
    for b in range(N_HIST_BINS):
        row = [repr(float(edges[b])), repr(float(edges[b + 1]))]
        row += [str(int(counts[c][b])) for c in values_by_controller]
        rows.append(",".join(row))
    return rows


def emit_report(report: CampaignReport, outdir) -> dict:
    """Write runs.csv, timing.csv, the histogram tables and summary.json."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)

    with open(out / "runs.csv", "w", encoding="utf-8") as fh:
        fh.write("run_id,controller,terminal_x1,min_x2,violated\n")
        for r in report.results:
            if r.failed:
                continue
            fh.write(f"{r.run_id},{r.controller},{r.terminal_x1!r},{r.min_x2!r},{int(r.violated)}\n")

    with open(out / "timing.csv", "w", encoding="utf-8") as fh:
        fh.write("run_id,controller,mean_solve_ms,std_solve_ms,n_solves\n")
        for r in report.results:
            if r.failed:
                continue
            t = np.asarray(r.solve_ms)
            mean = float(t.mean()) if t.size else float("nan")
            std = float(t.std()) if t.size else float("nan")
            fh.write(f"{r.run_id},{r.controller},{mean:.3f},{std:.3f},{t.size}\n")

    for name, getter in (("hist_terminal.csv", report.terminal_x1),
                         ("hist_minx2.csv", report.min_x2)):
        values = {c: getter(c) for c in report.controllers}
        with open(out / name, "w", encoding="utf-8") as fh:
            fh.write("bin_left,bin_right," + ",".join(f"count_{c}" for c in report.controllers) + "\n")
            for row in _histogram_rows(values):
                fh.write(row + "\n")

    summary = {"config": report.config, "controllers": {}}
    for c in report.controllers:
        term = report.terminal_x1(c)
        times = report.solve_times(c)
        res_nom, res_snm = report.max_residuals(c)
        summary["controllers"][c] = {
            "runs_ok": int(term.size),
            "violation_fraction": report.violation_fraction(c),
            "median_terminal_x1": float(np.median(term)) if term.size else None,
            "mean_terminal_x1": float(term.mean()) if term.size else None,
            "terminal_x1_outlier_fraction": float((term > 1.0).mean()) if term.size else None,
            "median_min_x2": float(np.median(report.min_x2(c))) if term.size else None,
            "mean_solve_ms": float(times.mean()) if times.size else None,
            "std_solve_ms": float(times.std()) if times.size else None,
            "max_feasibility_residual": res_nom,
            "max_snmpc_residual": res_snm,
        }
    if "nominal" in report.controllers and "stochastic" in report.controllers:
        t_nom = summary["controllers"]["nominal"]["mean_solve_ms"]
        t_sto = summary["controllers"]["stochastic"]["mean_solve_ms"]
        summary["timing_ratio_stochastic_to_nominal"] = (
            t_sto / t_nom if t_nom and t_sto else None
        )
    summary["failed_runs"] = [
        {"run_id": r.run_id, "controller": r.controller, "error": r.error}
        for r in report.failed_runs()
    ]
    with open(out / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary


def campaign_config_from_summary(path) -> CampaignConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return campaign_config_from_dict(json.load(fh)["config"])


# ----------------------------------------------------------------------
# command line
# ----------------------------------------------------------------------

_FLAG_HELP = {
    "runs": "Monte Carlo run count",
    "controller": "nominal, stochastic, or both",
    "seed": "master seed",
    "out": "output directory (campaign) or trace file (simulate)",
    "sigma": "scenario perturbation standard deviation",
    "ncl": "number of clusters",
    "Nn": "fresh scenarios per control period",
    "q": "batches kept in the FIFO buffer",
    "horizon": "prediction horizon length (steps)",
    "epsJ": "cost confidence parameter",
    "epsG": "constraint confidence parameter",
    "rho": "slack penalty weight",
}


def _add_common_overrides(p: argparse.ArgumentParser):
    p.add_argument("--config", type=str, default=None,
                   help="key = value file; explicit flags override it")
    p.add_argument("--sigma", type=float, default=None, help=_FLAG_HELP["sigma"])
    p.add_argument("--ncl", type=int, default=None, help=_FLAG_HELP["ncl"])
    p.add_argument("--Nn", type=int, default=None, help=_FLAG_HELP["Nn"])
    p.add_argument("--q", type=int, default=None, help=_FLAG_HELP["q"])
    p.add_argument("--horizon", type=int, default=None, help=_FLAG_HELP["horizon"])
    p.add_argument("--epsJ", type=float, default=None, help=_FLAG_HELP["epsJ"])
    p.add_argument("--epsG", type=float, default=None, help=_FLAG_HELP["epsG"])
    p.add_argument("--rho", type=float, default=None, help=_FLAG_HELP["rho"])
    p.add_argument("--duration", type=float, default=None, help="simulated days")
    p.add_argument("--tau", type=float, default=None, help="sampling period, days")
    p.add_argument("--steps-per-update", dest="steps_per_update", type=int, default=None,
                   help="plan steps applied before re-solving")
    p.add_argument("--substeps", type=int, default=None, help="RK4 substeps per tau")
    p.add_argument("--x2min", type=float, default=None, help="lymphocyte floor")
    p.add_argument("--rhof", type=float, default=None, help="terminal tumor weight")
    p.add_argument("--rhou", type=float, default=None, help="control effort weight")
    p.add_argument("--floor", type=float, default=None, help="minimum scenario multiplier")
    p.add_argument("--restarts", type=int, default=None, help="k-means restarts")
    p.add_argument("--solve-workers", dest="solve_workers", type=int, default=None,
                   help="threads for the per-scenario solves")


_CONFIG_TYPES = {
    "runs": int, "controller": str, "seed": int, "out": str, "sigma": float,
    "ncl": int, "Nn": int, "q": int, "horizon": int, "epsJ": float, "epsG": float,
    "rho": float, "duration": float, "tau": float, "steps_per_update": int,
    "substeps": int, "x2min": float, "rhof": float, "rhou": float, "floor": float,
    "restarts": int, "solve_workers": int, "workers": int, "plant": str,
}


def parse_config_file(path) -> dict:
    """Plain key = value (or key: value) lines; # starts a comment."""
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            for sep in ("=", ":"):
                if sep in line:
                    key, val = line.split(sep, 1)
                    break
            else:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
            key = key.strip().replace("-", "_")
            if key not in _CONFIG_TYPES:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = _CONFIG_TYPES[key](val.strip())
    return values


def _merged_options(args: argparse.Namespace) -> dict:
    opts = dict(parse_config_file(args.config)) if getattr(args, "config", None) else {}
    for key in _CONFIG_TYPES:
        cli_val = getattr(args, key, None)
        if cli_val is not None:
            opts[key] = cli_val
    return opts


def _sim_config_from_options(opts: dict) -> SimConfig:
    ocp_kwargs = {}
    for src, dst in (("horizon", "N"), ("tau", "tau"), ("rhof", "rho_f"),
                     ("rhou", "rho_u"), ("x2min", "x2_min"), ("rho", "rho"),
                     ("substeps", "substeps")):
        if src in opts:
            ocp_kwargs[dst] = opts[src]
    snmpc_kwargs = {}
    if "epsJ" in opts:
        snmpc_kwargs["eps_J"] = opts["epsJ"]
    if "epsG" in opts:
        snmpc_kwargs["eps_g"] = opts["epsG"]
    if "rho" in opts:
        snmpc_kwargs["rho"] = opts["rho"]
    sampler_kwargs = {}
    if "sigma" in opts:
        sampler_kwargs["sigma"] = opts["sigma"]
    if "floor" in opts:
        sampler_kwargs["floor"] = opts["floor"]
    if "seed" in opts:
        sampler_kwargs["seed"] = opts["seed"]
    cluster_kwargs = {}
    if "ncl" in opts:
        cluster_kwargs["n_cl"] = opts["ncl"]
    if "restarts" in opts:
        cluster_kwargs["restarts"] = opts["restarts"]
    sim_kwargs = {}
    for src, dst in (("duration", "duration"), ("steps_per_update", "steps_per_update"),
                     ("Nn", "N_n"), ("q", "q"), ("solve_workers", "solve_workers")):
        if src in opts:
            sim_kwargs[dst] = opts[src]
    return SimConfig(
        ocp=OcpConfig(**ocp_kwargs),
        snmpc=SnmpcConfig(**snmpc_kwargs),
        sampler=SamplerConfig(**sampler_kwargs),
        clustering=ClusteringConfig(**cluster_kwargs),
        **sim_kwargs,
    )


def _cmd_campaign(args) -> int:
    opts = _merged_options(args)
    controller = opts.get("controller", "both")
    controllers = ("nominal", "stochastic") if controller == "both" else (controller,)
    cfg = CampaignConfig(
        runs=opts.get("runs", 100),
        controllers=controllers,
        master_seed=opts.get("seed", 12345),
        outdir=opts.get("out", "results"),
        sim=_sim_config_from_options(opts),
    )
    report = run_campaign(cfg, workers=opts.get("workers"))
    summary = emit_report(report, cfg.outdir)
    for c in report.controllers:
        s = summary["controllers"][c]
        print(f"{c}: {s['runs_ok']} runs, violation fraction {s['violation_fraction']:.3f}, "
              f"median terminal tumor {s['median_terminal_x1']:.4f}, "
              f"mean solve {s['mean_solve_ms']:.1f} ms")
    if summary["failed_runs"]:
        print(f"{len(summary['failed_runs'])} run(s) failed; see summary.json")
    print(f"report written to {cfg.outdir}")
    return 0


def _cmd_simulate(args) -> int:
    opts = _merged_options(args)
    controller = opts.get("controller", "stochastic")
    if controller not in CONTROLLERS:
        print(f"simulate needs a single controller, got {controller!r}", file=sys.stderr)
        return 2
    seed = opts.get("seed", 12345)
    sim = _sim_config_from_options(opts)
    sim = replace(sim, controller=controller, sampler=replace(sim.sampler, seed=seed))
    if opts.get("plant", "nominal") == "nominal":
        from .model import nominal_parameters
        true_w = nominal_parameters()
    else:
        true_w = draw(sim.sampler, (STREAM_EVAL,), 1)[0]
    trace = run(true_w, sim, run_id=0)
    out = opts.get("out", "trace.csv")
    write_trace(trace, out)
    if trace.summaries is not None:
        cluster_log = Path(out).with_suffix(".clusters.txt")
        with open(cluster_log, "w", encoding="utf-8") as fh:
            for k, summary in enumerate(trace.summaries):
                fh.write(f"# period {k}\n")
                fh.write(summary.to_text() if summary is not None else "# cold start\n")
        print(f"cluster log written to {cluster_log}")
    print(f"terminal tumor {trace.terminal_x1:.4f}, min lymphocytes {trace.min_x2:.4f}, "
          f"violated={trace.violated}")
    print(f"trace written to {out}")
    return 0


def _cmd_selftest(_args) -> int:
    from .selfcheck import run_selftest
    return 0 if run_selftest() else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clustermpc",
        description="Cluster-scenario stochastic NMPC benchmark: campaigns, "
                    "single closed-loop traces, and self checks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_camp = sub.add_parser("campaign", help="Monte Carlo comparison campaign")
    p_camp.add_argument("--runs", type=int, default=None, help=_FLAG_HELP["runs"])
    p_camp.add_argument("--controller", type=str, default=None,
                        choices=["nominal", "stochastic", "both"], help=_FLAG_HELP["controller"])
    p_camp.add_argument("--seed", type=int, default=None, help=_FLAG_HELP["seed"])
    p_camp.add_argument("--out", type=str, default=None, help=_FLAG_HELP["out"])
    p_camp.add_argument("--workers", type=int, default=None, help="process pool size")
    _add_common_overrides(p_camp)
    p_camp.set_defaults(func=_cmd_campaign)

    p_sim = sub.add_parser("simulate", help="single closed-loop trace")
    p_sim.add_argument("--controller", type=str, default=None,
                       choices=["nominal", "stochastic"], help=_FLAG_HELP["controller"])
    p_sim.add_argument("--seed", type=int, default=None, help=_FLAG_HELP["seed"])
    p_sim.add_argument("--out", type=str, default=None, help=_FLAG_HELP["out"])
    p_sim.add_argument("--plant", type=str, default=None, choices=["nominal", "sampled"],
                       help="true plant parameters: nominal or drawn from the sampler")
    _add_common_overrides(p_sim)
    p_sim.set_defaults(func=_cmd_simulate)

    p_test = sub.add_parser("selftest", help="run the built-in property checks")
    p_test.set_defaults(func=_cmd_selftest)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
