"""Command-line front end.

Wires the pipeline (power norms -> truncation -> allocation -> solve ->
bands), runs convergence/coverage studies, and writes CSV/JSON artifacts.
Configs are single JSON files; see README for the schema.  Artifacts are
byte-stable: fixed column order, shortest round-trip float formatting,
LF line endings, and replication-ordered study output regardless of the
worker count.

Exit codes: 0 ok, 2 config, 3 contractivity, 4 budget, 5 numerical.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import dataclasses
import json
import math
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .allocation import optimal_allocation
from .confidence import (export_band_json, integral_psi, nonasymptotic_band,
                         simulate_sup_quantile, solution_psi, tail_shape_report)
from .errors import (BandTooWide, BudgetError, ConfigError, ContractivityError,
                     NotPSD, OracleInfeasible, UnsupportedDerivative)
from .estimator import (EstimateTable, derivative_solve, estimate_covariance,
                        estimate_parametric_integral, solve_fredholm_mc, solve_geometric)
from .neumann import choose_truncation, damped_solution_oracle, truncated_solution_oracle
from .problem import ProblemSpec, power_norms
from .registry import build_problem, exact_solution

MODES = ("solve", "integrate", "derivative", "geometric", "allocate-only",
         "rate-study", "coverage-study")
_SUBCOMMAND_MODE = {"allocate": "allocate-only"}
DEFAULT_BUDGETS = (1_000, 10_000, 100_000, 1_000_000)


@dataclass
class ExperimentConfig:
    problem: dict
    mode: str = "solve"
    epsilon: float = 0.01
    budget: int = 100_000
    delta: float = 0.05
    grid: int = 101
    seed: int = 0
    out_dir: str = "out"
    replications: int = 1
    workers: int = 1
    lam: float = 0.5
    M: Optional[int] = None
    band_method: str = "gauss-sim"
    n_sim: int = 10_000
    budgets: tuple = DEFAULT_BUDGETS
    norms_method: str = "quadrature"
    m_max: int = 12
    export_per_term: bool = False
    export_covariance: bool = False
    tail_report: bool = False

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["budgets"] = list(self.budgets)
        return d


def validate_and_echo(raw: dict, echo: bool = True) -> ExperimentConfig:
    """Normalize a raw config dict, filling defaults; echo the resolved
    config to stdout as JSON.  No side effects beyond the echo."""
    cfg = _normalize(raw)
    if echo:
        print(json.dumps(cfg.to_dict(), indent=2))
    return cfg


def _normalize(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config field(s): {sorted(unknown)}")
    if "problem" not in raw or not isinstance(raw["problem"], dict) or "name" not in raw["problem"]:
        raise ConfigError("config needs a 'problem' object with a 'name'")
    cfg = ExperimentConfig(**raw)
    cfg.budgets = tuple(int(b) for b in cfg.budgets)
    if cfg.mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}")
    if not 0.0 < cfg.epsilon < 0.5:
        raise ConfigError("epsilon must lie in (0, 0.5)")
    if not 0.0 < cfg.delta < 1.0:
        raise ConfigError("delta must lie in (0, 1)")
    if cfg.budget < 1 or cfg.grid < 2 or cfg.replications < 1 or cfg.workers < 1:
        raise ConfigError("budget, grid, replications and workers must be positive (grid >= 2)")
    if cfg.band_method not in ("gauss-sim", "nonasymptotic-psi", "both"):
        raise ConfigError("band_method must be gauss-sim | nonasymptotic-psi | both")
    if not 0.0 < cfg.lam < 1.0:
        raise ConfigError("lam must lie in (0, 1)")
    if cfg.norms_method not in ("analytic", "quadrature", "mc"):
        raise ConfigError("norms_method must be analytic | quadrature | mc")
    if cfg.tail_report and cfg.n_sim < 100_000:
        raise ConfigError("tail_report needs n_sim >= 1e5")
    if (cfg.tail_report or cfg.export_covariance) and cfg.band_method == "nonasymptotic-psi":
        raise ConfigError("tail_report/export_covariance need the gauss-sim band")
    _build_spec(cfg)  # fail early on problem parameters
    return cfg


def _build_spec(cfg: ExperimentConfig) -> ProblemSpec:
    params = {k: v for k, v in cfg.problem.items() if k != "name"}
    params.setdefault("grid", cfg.grid)
    return build_problem(cfg.problem["name"], params)


@dataclass(frozen=True)
class KernelTimesForcing:
    """g(t, x) = K(t, x) f(x): the first Neumann term as a parametric integral."""

    spec: ProblemSpec

    def __call__(self, t, x):
        return np.asarray(self.spec.kernel(t, x)) * np.asarray(self.spec.forcing(x))


# ---------------------------------------------------------------------------
# artifact writers


def _fmt(x) -> str:
    return repr(float(x))


def write_estimate_csv(path, est: EstimateTable) -> None:
    dim = est.t_grid.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"t_{i + 1}" for i in range(dim)] + ["value", "var", "n_used", "mode", "seed"])
        for j in range(est.t_grid.shape[0]):
            w.writerow([_fmt(c) for c in est.t_grid[j]]
                       + [_fmt(est.values[j]), _fmt(est.pointwise_var[j]),
                          est.n_used, est.mode, est.seed])


def write_per_term_csv(path, est: EstimateTable) -> None:
    dim = est.t_grid.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"t_{i + 1}" for i in range(dim)] + ["m", "value"])
        for m in range(est.per_term.shape[0]):
            for j in range(est.t_grid.shape[0]):
                w.writerow([_fmt(c) for c in est.t_grid[j]] + [m + 1, _fmt(est.per_term[m, j])])


def write_covariance_csv(path, cov) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([";".join(_fmt(x) for x in pt) for pt in cov.t_grid])
        for row in cov.Z_hat:
            w.writerow([_fmt(v) for v in row])


def _write_manifest(out, cfg: ExperimentConfig, artifacts, summary, t0) -> None:
    manifest = {
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "versions": {"fredmc": __version__, "python": sys.version.split()[0],
                     "numpy": np.__version__},
        "wall_time_s": round(time.monotonic() - t0, 3),
        "artifacts": sorted(artifacts),
        "summary": summary,
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# pipeline pieces


def _pipeline(cfg: ExperimentConfig, spec: ProblemSpec, budget: Optional[int] = None):
    pnt = power_norms(spec, m_max=cfg.m_max, method=cfg.norms_method)
    plan = choose_truncation(pnt, spec.f_norm, cfg.epsilon)
    alloc = optimal_allocation(pnt, plan.N, budget or cfg.budget)
    return pnt, plan, alloc


def _reference_solution(spec: ProblemSpec, pnt) -> np.ndarray:
    """High-accuracy reference values on the output grid: closed form when
    the registry has one, otherwise a deep truncated-series oracle."""
    grid = spec.domain.grid()
    exact = exact_solution(spec)
    if exact is not None:
        return np.asarray(exact(grid), dtype=float)
    plan = choose_truncation(pnt, spec.f_norm, 1e-8)
    if plan.N > 12:
        plan = dataclasses.replace(plan, N=12)
    return truncated_solution_oracle(spec, plan, grid)


def _bands_for(cfg: ExperimentConfig, spec, alloc, est, n: int):
    """(band list for band.json, covariance model or None)."""
    bands = []
    cov = None
    if cfg.band_method in ("gauss-sim", "both"):
        cov = estimate_covariance(spec, alloc, est.t_grid, est.moments)
        extras = {"n": n}
        if cfg.tail_report:
            gauss, sims = simulate_sup_quantile(cov, cfg.delta, cfg.n_sim, cfg.seed, n=n,
                                                return_sims=True)
            top = np.quantile(sims, [0.9, 1.0 - 60.0 / cfg.n_sim])
            kappa, c_fit = tail_shape_report(cov, np.linspace(top[0], top[1], 25), sims)
            extras.update(kappa_fit=kappa, C_fit=c_fit)
        else:
            gauss = simulate_sup_quantile(cov, cfg.delta, cfg.n_sim, cfg.seed, n=n)
        bands.append((gauss, extras))
    if cfg.band_method in ("nonasymptotic-psi", "both"):
        if est.mode == "solution":
            psi, sigma = solution_psi(spec, alloc)
        elif est.mode == "integral":
            psi, sigma = integral_psi(spec)
        else:
            raise ConfigError(f"nonasymptotic band is not wired for mode {est.mode!r}")
        bands.append((nonasymptotic_band(psi, spec.domain, spec.metric, sigma, cfg.delta, n),
                      {"n": n}))
    return bands, cov


# ---------------------------------------------------------------------------
# modes


def _run_allocate(cfg: ExperimentConfig, out, t0) -> int:
    spec = _build_spec(cfg)
    pnt, plan, alloc = _pipeline(cfg, spec)
    alloc.to_json(out / "allocation.json")
    _write_manifest(out, cfg, ["allocation.json"],
                    {"N": plan.N, "tail_bound": plan.tail_bound,
                     "beta_S": pnt.fit_s.beta, "beta_U": pnt.fit.beta,
                     "phi_predicted": alloc.phi_predicted}, t0)
    print(f"allocate-only: N={plan.N} cost_B={alloc.cost_B} phi={alloc.phi_predicted:.6g}")
    return 0


def _run_point_estimate(cfg: ExperimentConfig, out, t0) -> int:
    spec = _build_spec(cfg)
    grid = spec.domain.grid()
    artifacts = ["estimate.csv", "manifest.json"]
    summary: dict = {}
    collect = cfg.band_method in ("gauss-sim", "both")

    cov = None
    if cfg.mode == "geometric":
        if cfg.export_covariance or cfg.tail_report:
            raise ConfigError("geometric mode has no plug-in covariance model")
        pnt, _, _ = _pipeline(cfg, spec, budget=max(cfg.budget, 1))
        M = int(cfg.M) if cfg.M else max(2, int(round(math.sqrt(cfg.budget))))
        est = solve_geometric(spec, cfg.lam, M, cfg.budget, grid, cfg.seed, pnt=pnt)
        summary["lam"], summary["M"], summary["n_used"] = cfg.lam, M, est.n_used
        bands = []
    elif cfg.mode == "integrate":
        est = estimate_parametric_integral(KernelTimesForcing(spec), spec.mu, spec.domain,
                                           grid, cfg.budget, cfg.seed, collect_covariance=collect)
        bands, cov = _bands_for(cfg, spec, None, est, cfg.budget)
    else:
        pnt, plan, alloc = _pipeline(cfg, spec)
        alloc.to_json(out / "allocation.json")
        artifacts.append("allocation.json")
        solver = derivative_solve if cfg.mode == "derivative" else solve_fredholm_mc
        est = solver(spec, plan, alloc, grid, cfg.seed, collect_covariance=collect)
        if cfg.mode == "derivative" and cfg.band_method != "gauss-sim":
            raise ConfigError("derivative mode supports band_method gauss-sim only")
        bands, cov = _bands_for(cfg, spec, alloc, est, cfg.budget)
        summary["N"] = plan.N
        summary["tail_bound"] = plan.tail_bound

    write_estimate_csv(out / "estimate.csv", est)
    if cfg.export_per_term and est.mode != "geometric":
        write_per_term_csv(out / "per_term.csv", est)
        artifacts.append("per_term.csv")
    if cfg.export_covariance and cov is not None:
        write_covariance_csv(out / "covariance.csv", cov)
        artifacts.append("covariance.csv")
    if bands:
        export_band_json(out / "band.json", bands)
        artifacts.append("band.json")
        summary["u_delta"] = {b.method: b.u_delta for b, _ in bands}
    _write_manifest(out, cfg, artifacts, summary, t0)
    print(f"{cfg.mode}: wrote {len(artifacts)} artifact(s) to {out}")
    return 0


def _solve_sup_error(cfg, spec, pnt, plan, n, rep, ref) -> float:
    alloc = optimal_allocation(pnt, plan.N, n)
    est = solve_fredholm_mc(spec, plan, alloc, spec.domain.grid(), cfg.seed + rep)
    return float(np.max(np.abs(est.values - ref)))


def _geometric_sup_error(cfg, spec, pnt, n, rep, ref) -> float:
    M = cfg.M or max(2, int(round(math.sqrt(n))))
    est = solve_geometric(spec, cfg.lam, M, n, spec.domain.grid(), cfg.seed + rep, pnt=pnt)
    return float(np.max(np.abs(est.values - ref)))


def _parallel(cfg: ExperimentConfig, tasks):
    """Run no-arg callables, preserving task order in the result list."""
    if cfg.workers == 1:
        return [t() for t in tasks]
    with concurrent.futures.ThreadPoolExecutor(max_workers=cfg.workers) as ex:
        futures = [ex.submit(t) for t in tasks]
        return [f.result() for f in futures]


def _loglog_slope(ns, errs) -> float:
    X = np.stack([np.ones(len(ns)), np.log(np.asarray(ns, dtype=float))], axis=1)
    coef, *_ = np.linalg.lstsq(X, np.log(np.asarray(errs, dtype=float)), rcond=None)
    return float(coef[1])


def _run_rate_study(cfg: ExperimentConfig, out, t0) -> int:
    spec = _build_spec(cfg)
    pnt, plan, _ = _pipeline(cfg, spec, budget=max(cfg.budgets))
    ref_solve = _reference_solution(spec, pnt)
    ref_geo = damped_solution_oracle(spec, cfg.lam, spec.domain.grid())
    rows = []
    slopes = {}
    for method, err_fn, ref in (("solve", _solve_sup_error, ref_solve),
                                ("geometric", _geometric_sup_error, ref_geo)):
        rmse = []
        for n in cfg.budgets:
            if method == "solve":
                tasks = [lambda n=n, r=r: err_fn(cfg, spec, pnt, plan, n, r, ref)
                         for r in range(cfg.replications)]
            else:
                tasks = [lambda n=n, r=r: err_fn(cfg, spec, pnt, n, r, ref)
                         for r in range(cfg.replications)]
            errs = _parallel(cfg, tasks)
            rows.extend((method, n, r, e) for r, e in enumerate(errs))
            rmse.append(math.sqrt(float(np.mean(np.square(errs)))))
        slopes[method] = _loglog_slope(cfg.budgets, rmse)
    with open(out / "rates.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "n", "replication", "sup_error"])
        for method, n, r, e in rows:
            w.writerow([method, n, r, _fmt(e)])
    _write_manifest(out, cfg, ["rates.csv"], {"slopes": slopes}, t0)
    print("rate-study slopes: " + ", ".join(f"{k}={v:.3f}" for k, v in slopes.items()))
    return 0


def _coverage_rep(cfg, spec, plan, alloc, ref, rep) -> int:
    grid = spec.domain.grid()
    est = solve_fredholm_mc(spec, plan, alloc, grid, cfg.seed + rep, collect_covariance=True)
    cov = estimate_covariance(spec, alloc, grid, est.moments)
    band = simulate_sup_quantile(cov, cfg.delta, cfg.n_sim, cfg.seed + rep, n=cfg.budget)
    return int(np.max(np.abs(est.values - ref)) <= band.half_width)


def _run_coverage_study(cfg: ExperimentConfig, out, t0) -> int:
    spec = _build_spec(cfg)
    pnt, plan, alloc = _pipeline(cfg, spec)
    ref = _reference_solution(spec, pnt)
    tasks = [lambda r=r: _coverage_rep(cfg, spec, plan, alloc, ref, r)
             for r in range(cfg.replications)]
    covered = _parallel(cfg, tasks)
    with open(out / "coverage.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["replication", "covered"])
        for r, c in enumerate(covered):
            w.writerow([r, c])
    rate = float(np.mean(covered))
    _write_manifest(out, cfg, ["coverage.csv"],
                    {"coverage": rate, "delta": cfg.delta, "N": plan.N}, t0)
    print(f"coverage-study: {rate:.3f} over {cfg.replications} replications (target {1 - cfg.delta})")
    return 0


def run(cfg: ExperimentConfig) -> int:
    """Execute one experiment; writes artifacts under cfg.out_dir."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.monotonic()
    if cfg.mode == "allocate-only":
        return _run_allocate(cfg, out, t0)
    if cfg.mode in ("solve", "integrate", "derivative", "geometric"):
        return _run_point_estimate(cfg, out, t0)
    if cfg.mode == "rate-study":
        return _run_rate_study(cfg, out, t0)
    if cfg.mode == "coverage-study":
        return _run_coverage_study(cfg, out, t0)
    raise ConfigError(f"unhandled mode {cfg.mode!r}")


# ---------------------------------------------------------------------------
# entry point


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fredmc",
                                description="Monte-Carlo Fredholm solver with uniform-norm bands")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("solve", "integrate", "derivative", "geometric", "allocate",
                 "rate-study", "coverage-study", "validate"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="path to the JSON experiment config")
        sp.add_argument("--seed", type=int, default=None, help="override config seed")
        sp.add_argument("--budget", type=int, default=None, help="override config budget")
        sp.add_argument("--out", default=None, help="override config out_dir")
        sp.add_argument("--workers", type=int, default=None, help="override config workers")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        with open(args.config, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.budget is not None:
        raw["budget"] = args.budget
    if args.out is not None:
        raw["out_dir"] = args.out
    if args.workers is not None:
        raw["workers"] = args.workers
    if args.command != "validate":
        raw["mode"] = _SUBCOMMAND_MODE.get(args.command, args.command)
    try:
        cfg = validate_and_echo(raw, echo=args.command == "validate")
        if args.command == "validate":
            return 0
        return run(cfg)
    except ContractivityError as exc:
        print(f"contractivity error: {exc}", file=sys.stderr)
        return 3
    except BudgetError as exc:
        print(f"budget error: {exc}", file=sys.stderr)
        return 4
    except (NotPSD, BandTooWide) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 5
    except (ConfigError, OracleInfeasible, UnsupportedDerivative, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
