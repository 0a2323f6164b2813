"""Config-driven experiments: synthetic data, estimator ensembles, percentile
bands, box statistics, Hessian report, and deterministic file emission.

A run is fully determined by (config, seed): per-estimator and per-replicate
RNG streams are derived from the master seed by index, so outputs are
bit-identical across repeat runs and across worker-thread counts.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .estimators import (
    EstimateEnsemble,
    FitProblem,
    McmcSettings,
    ParameterSpace,
    bootstrap,
    mcmc_estimate,
)
from .models import (
    EaihrdParams,
    ModelBinding,
    eaihrd_system,
    eaihrd_to_4tha,
    EAIHRD_OBSERVABLE,
    fourtha_binding,
    seir_binding,
)
from .noise import NoiseSpec, apply_noise
from .objectives import ObjectiveSpec
from .ode import IntegrationDivergedError, SolverConfig, TimeSeries, daily_grid, integrate
from .sensitivity import HessianReport, loss_hessian

__all__ = [
    "BandSummary",
    "BoxStats",
    "EmptyBandError",
    "ExperimentConfig",
    "ExperimentReport",
    "KNOWN_ESTIMATORS",
    "box_stats",
    "percentile_bands",
    "run_experiment",
    "write_report",
]

KNOWN_ESTIMATORS = ("do", "mle", "map", "mcmc")
BAND_PERCENTILES = (5.0, 25.0, 50.0, 75.0, 95.0)


class EmptyBandError(RuntimeError):
    """Every ensemble trajectory failed; no band can be formed."""


@dataclass(frozen=True)
class ExperimentConfig:
    model: str
    exact_params: dict
    space: ParameterSpace
    data_noise: NoiseSpec
    bootstrap_noise: NoiseSpec
    estimators: tuple
    t_train: float
    horizon: float
    k: int
    mcmc: McmcSettings = McmcSettings()
    outputs: Optional[str] = None
    seed: int = 0
    objective: Optional[ObjectiveSpec] = None
    non_observable: Optional[str] = None
    n_restarts: int = 10

    def validate(self):
        if self.model not in ("seir", "eaihrd", "fourtha"):
            raise ValueError(f"unknown model {self.model!r}")
        if self.t_train > self.horizon:
            raise ValueError(
                f"t_train ({self.t_train:g}) must not exceed horizon ({self.horizon:g})")
        if self.k < 1:
            raise ValueError("k must be at least 1")
        unknown = [e for e in self.estimators if e not in KNOWN_ESTIMATORS]
        if unknown:
            raise ValueError(f"unknown estimators {unknown}; known: {KNOWN_ESTIMATORS}")
        binding, exact_q, _ = resolve_model(self)
        for i, name in enumerate(binding.quantity_names):
            if name in self.space.fixed:
                continue
            lo = self.space.lower[i]
            hi = self.space.upper[i]
            if not (lo <= exact_q[i] <= hi):
                raise ValueError(
                    f"exact value of free quantity {name} ({exact_q[i]:g}) lies "
                    f"outside its bounds [{lo:g}, {hi:g}]")


@dataclass(frozen=True)
class BandSummary:
    """Pointwise percentile curves (5/25/50/75/95) of ensemble predictions."""

    times: np.ndarray
    curves: np.ndarray  # (5, n_times) in BAND_PERCENTILES order
    variable: str
    n_used: int = 0
    n_failed: int = 0

    def curve(self, percentile: float) -> np.ndarray:
        return self.curves[BAND_PERCENTILES.index(percentile)]


@dataclass(frozen=True)
class BoxStats:
    parameter: str
    whisker_low: float
    q25: float
    median: float
    q75: float
    whisker_high: float
    outliers: tuple


@dataclass
class EstimatorRun:
    name: str
    ensemble: EstimateEnsemble
    bands: dict
    box: dict
    diagnostics: dict = field(default_factory=dict)


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    clean_data: TimeSeries
    reported_data: TimeSeries
    runs: dict
    hessian: Optional[HessianReport]
    errors: dict
    timings_sec: dict


# ---------------------------------------------------------------------------
# Model resolution
# ---------------------------------------------------------------------------


def _seir_exact(exact: dict):
    required = ("beta", "sigma", "gamma", "S0", "E0", "I0")
    missing = [n for n in required if n not in exact]
    if missing:
        raise ValueError(f"seir exact_params missing {missing}")
    if "N" in exact:
        N = float(exact["N"])
    elif "R0" in exact:
        N = float(exact["S0"] + exact["E0"] + exact["I0"] + exact["R0"])
    else:
        raise ValueError("seir exact_params needs N or R0")
    return float(exact["I0"]), N


def resolve_model(cfg: ExperimentConfig):
    """Returns (binding, exact quantity vector, clean observable generator)."""
    if cfg.model == "seir":
        I0, N = _seir_exact(cfg.exact_params)
        binding = seir_binding(I0=I0, N=N)
        exact_q = binding.quantity_vector(cfg.exact_params)

        def generate(grid):
            return binding.observable(exact_q, grid)

        return binding, exact_q, generate

    binding = fourtha_binding()
    if cfg.model == "fourtha":
        exact_q = binding.quantity_vector(cfg.exact_params)

        def generate(grid):
            return binding.observable(exact_q, grid)

        return binding, exact_q, generate

    # "eaihrd": raw compartment parameters; data from the native system, the
    # estimation runs in the reduced quantities.
    raw = EaihrdParams(**cfg.exact_params)
    reduced = eaihrd_to_4tha(raw)
    exact_q = binding.quantity_vector({
        "F": reduced.F, "R2": reduced.R2, "R3": reduced.R3, "C1": reduced.C1,
        "C2": reduced.C2, "r1": reduced.r1, "alpha": reduced.alpha,
        "D0": reduced.D0, "D1_0": reduced.D1_0, "D2_0": reduced.D2_0,
        "D3_0": reduced.D3_0, "Atilde0": reduced.Atilde0})

    def generate(grid):
        cfg_native = SolverConfig(output_grid=grid, rel_tol=binding.rel_tol,
                                  abs_tol=binding.abs_tol)
        ts = integrate(eaihrd_system(), raw.theta(), raw.x0(), cfg_native)
        return ts.select(EAIHRD_OBSERVABLE)

    return binding, exact_q, generate


def _objective_for(cfg: ExperimentConfig, binding: ModelBinding,
                   estimator: str) -> ObjectiveSpec:
    transform = (cfg.objective.data_transform if cfg.objective is not None
                 else ("increments" if binding.default_noise_structure == "increment"
                       else "levels"))
    if estimator == "do":
        kind = cfg.objective.kind if cfg.objective is not None else "rel_sq"
        if kind in ("neg_log_likelihood", "neg_log_posterior"):
            kind = "rel_sq"
        return ObjectiveSpec(kind=kind, data_transform=transform)
    if estimator == "mle":
        return ObjectiveSpec(kind="neg_log_likelihood", data_transform=transform)
    return ObjectiveSpec(kind="neg_log_posterior", data_transform=transform)


def _derived_seed(master: int, *path: int) -> int:
    return int(np.random.SeedSequence((int(master),) + tuple(int(p) for p in path))
               .generate_state(1)[0])


# ---------------------------------------------------------------------------
# Ensemble statistics
# ---------------------------------------------------------------------------


def percentile_bands(ensemble: EstimateEnsemble, problem: FitProblem,
                     horizon: float, variable: str) -> BandSummary:
    """Empirical pointwise percentiles of ensemble trajectories for one state
    variable over the full horizon (linear-interpolation quantiles)."""
    if ensemble.k < 1:
        raise EmptyBandError("ensemble is empty")
    binding = problem.binding
    if variable == binding.observable_name:
        index = binding.observable_index
    elif variable == binding.nonobservable_name:
        index = binding.nonobservable_index
    else:
        raise ValueError(f"unknown variable {variable!r} for model {binding.name}")
    grid = daily_grid(horizon)
    rows = []
    failed = 0
    for draw in ensemble.draws:
        try:
            ts = problem.state_trajectory(draw, grid)
        except IntegrationDivergedError:
            failed += 1
            continue
        rows.append(ts.column(index))
    if not rows:
        raise EmptyBandError(f"all {ensemble.k} trajectories failed for {variable}")
    mat = np.vstack(rows)
    curves = np.percentile(mat, BAND_PERCENTILES, axis=0)
    return BandSummary(times=grid, curves=curves, variable=variable,
                       n_used=len(rows), n_failed=failed)


def box_stats(ensemble: EstimateEnsemble, parameter: str) -> BoxStats:
    """Five-number box summary with 1.5*IQR whiskers."""
    x = ensemble.column(parameter)
    q25, med, q75 = np.percentile(x, [25.0, 50.0, 75.0])
    iqr = q75 - q25
    lo_fence = q25 - 1.5 * iqr
    hi_fence = q75 + 1.5 * iqr
    inside = x[(x >= lo_fence) & (x <= hi_fence)]
    outliers = tuple(float(v) for v in np.sort(x[(x < lo_fence) | (x > hi_fence)]))
    return BoxStats(parameter=parameter, whisker_low=float(inside.min()),
                    q25=float(q25), median=float(med), q75=float(q75),
                    whisker_high=float(inside.max()), outliers=outliers)


# ---------------------------------------------------------------------------
# The experiment driver
# ---------------------------------------------------------------------------


def run_experiment(cfg: ExperimentConfig, threads: int = 1) -> ExperimentReport:
    """Full pipeline: data generation, per-estimator ensembles, bands for the
    observable and the designated non-observable, box stats, Hessian report.

    Per-estimator failures are recorded in ``report.errors`` and the run
    continues; files are written when ``cfg.outputs`` is set.
    """
    cfg.validate()
    binding, exact_q, generate = resolve_model(cfg)
    grid = daily_grid(cfg.horizon)
    t_start = time.perf_counter()
    timings: dict = {}

    clean = generate(grid)
    reported = apply_noise(clean, cfg.data_noise)
    timings["data"] = time.perf_counter() - t_start

    non_obs = cfg.non_observable or binding.nonobservable_name
    runs: dict = {}
    errors: dict = {}
    for i, est in enumerate(cfg.estimators):
        t0 = time.perf_counter()
        problem = FitProblem(binding=binding, space=cfg.space,
                             objective_spec=_objective_for(cfg, binding, est),
                             t_train=cfg.t_train)
        est_seed = _derived_seed(cfg.seed, 1, i)
        try:
            if est == "mcmc":
                ensemble, diag = mcmc_estimate(problem, reported, cfg.mcmc,
                                               seed=est_seed,
                                               n_restarts=cfg.n_restarts)
            else:
                ensemble = bootstrap(problem, reported, cfg.bootstrap_noise,
                                     cfg.k, est_seed, n_restarts=cfg.n_restarts,
                                     threads=threads, estimator_name=est)
                diag = {"effective_k": ensemble.k,
                        "n_failures": len(ensemble.failures)}
            bands = {}
            for var in (binding.observable_name, non_obs):
                bands[var] = percentile_bands(ensemble, problem, cfg.horizon, var)
            box = {name: box_stats(ensemble, name) for name in ensemble.names}
            runs[est] = EstimatorRun(name=est, ensemble=ensemble, bands=bands,
                                     box=box, diagnostics=diag)
        except Exception as exc:  # noqa: BLE001 - partial results by design
            errors[est] = f"{type(exc).__name__}: {exc}"
        timings[est] = time.perf_counter() - t0

    t0 = time.perf_counter()
    hessian = None
    try:
        hessian = loss_hessian(binding, exact_q, cfg.space.free_names, grid)
    except Exception as exc:  # noqa: BLE001
        errors["hessian"] = f"{type(exc).__name__}: {exc}"
    timings["hessian"] = time.perf_counter() - t0
    timings["total"] = time.perf_counter() - t_start

    report = ExperimentReport(config=cfg, clean_data=clean, reported_data=reported,
                              runs=runs, hessian=hessian, errors=errors,
                              timings_sec=timings)
    if cfg.outputs:
        write_report(report, cfg.outputs)
    return report


# ---------------------------------------------------------------------------
# File emission (all floats with 17 significant digits)
# ---------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _write_csv(path: Path, header: list, rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) if isinstance(v, (int, float, np.floating))
                              else str(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


def write_series_csv(path: Path, series: TimeSeries, value_names: list) -> None:
    header = ["time"] + list(value_names)
    rows = [[t] + [series.values[i, j] for j in range(series.values.shape[1])]
            for i, t in enumerate(series.times)]
    _write_csv(path, header, rows)


def write_report(report: ExperimentReport, outdir) -> None:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = report.config
    binding, exact_q, _ = resolve_model(cfg)

    write_series_csv(out / "data_clean.csv", report.clean_data,
                     [binding.observable_name])
    write_series_csv(out / "data_reported.csv", report.reported_data,
                     [binding.observable_name])

    for est, run in report.runs.items():
        _write_csv(out / f"estimates_{est}.csv", list(run.ensemble.names),
                   run.ensemble.draws)
        for var, band in run.bands.items():
            rows = [[band.times[i]] + [band.curves[p, i] for p in range(5)]
                    for i in range(band.times.shape[0])]
            _write_csv(out / f"bands_{est}_{var}.csv",
                       ["time", "p5", "p25", "p50", "p75", "p95"], rows)

    box_rows = []
    for est, run in report.runs.items():
        for name, bx in run.box.items():
            box_rows.append([est, name, _fmt(bx.whisker_low), _fmt(bx.q25),
                             _fmt(bx.median), _fmt(bx.q75), _fmt(bx.whisker_high),
                             ";".join(_fmt(v) for v in bx.outliers)])
    _write_csv(out / "boxstats.csv",
               ["estimator", "parameter", "whisker_low", "q25", "median",
                "q75", "whisker_high", "outliers"], box_rows)

    if report.hessian is not None:
        h = report.hessian
        lines = ["row," + ",".join(h.parameter_names)]
        for i, name in enumerate(h.parameter_names):
            lines.append(name + "," + ",".join(_fmt(v) for v in h.matrix[i]))
        lines.append("eigenvalues," + ",".join(_fmt(v) for v in h.eigenvalues))
        lines.append(f"eigengap_log10,{_fmt(h.eigengap_log10)}")
        lines.append(f"eigengap_index,{h.eigengap_index}")
        (out / "hessian.csv").write_text("\n".join(lines) + "\n")

    meta = {
        "model": cfg.model,
        "seed": cfg.seed,
        "k": cfg.k,
        "t_train": cfg.t_train,
        "horizon": cfg.horizon,
        "estimators": list(cfg.estimators),
        "data_noise": {"structure": cfg.data_noise.structure,
                       "sigma": cfg.data_noise.sigma},
        "bootstrap_noise": {"structure": cfg.bootstrap_noise.structure,
                            "sigma": cfg.bootstrap_noise.sigma},
        "estimator_runs": {
            est: {
                "effective_k": run.ensemble.k,
                "requested_k": run.ensemble.requested_k,
                "n_failures": len(run.ensemble.failures),
                "parameters": list(run.ensemble.names),
                "diagnostics": run.diagnostics,
            }
            for est, run in report.runs.items()
        },
        "errors": report.errors,
        "eigengap_log10": (None if report.hessian is None
                           else report.hessian.eigengap_log10),
        "timings_sec": {k: round(v, 6) for k, v in report.timings_sec.items()},
    }
    (out / "report.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
