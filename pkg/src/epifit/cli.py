"""The ``epifit`` command line front end.

Subcommands: ``run`` (full experiment), ``validate`` (config check only),
``check-symmetry`` (numerical verification of a symmetry partner),
``hessian`` (loss-Hessian spectrum at the exact point), ``gen-data``
(synthetic clean + reported series).

Exit codes: 0 success, 1 configuration error, 2 runtime failure.  The output
directory is resolved as --output flag, then the config's ``outputs`` field,
then the ``EPIFIT_OUTPUT`` environment variable.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, load_config
from .experiment import resolve_model, run_experiment, write_report, write_series_csv
from .models import (
    FourthAParams,
    SeirParams,
    eaihrd_symmetry_pair,
    seir_symmetry_pair,
    verify_symmetry,
)
from .noise import apply_noise
from .ode import daily_grid
from .sensitivity import loss_hessian

__all__ = ["entrypoint", "main"]

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="epifit",
        description="Practical-identifiability experiments for epidemic ODE models")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, output=True):
        p.add_argument("--quiet", action="store_true", help="suppress chatter")
        if output:
            p.add_argument("--output", help="output directory (overrides config)")

    p_run = sub.add_parser("run", help="run a full experiment from a config file")
    p_run.add_argument("config")
    p_run.add_argument("--seed", type=int, help="override the config seed")
    p_run.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                       help="worker threads for bootstrap replicates")
    add_common(p_run)

    p_val = sub.add_parser("validate", help="check a config file and exit")
    p_val.add_argument("config")
    add_common(p_val, output=False)

    p_sym = sub.add_parser("check-symmetry",
                           help="compute the symmetry partner and verify the "
                                "observables agree")
    p_sym.add_argument("model", choices=["seir", "eaihrd"])
    p_sym.add_argument("params_file", help="JSON file of parameter values")
    p_sym.add_argument("--horizon", type=float, default=None, help="days")
    p_sym.add_argument("--tol", type=float, default=1e-4)
    p_sym.add_argument("--quiet", action="store_true")

    p_hes = sub.add_parser("hessian",
                           help="loss-Hessian eigen-spectrum at the exact point")
    p_hes.add_argument("config")
    add_common(p_hes)

    p_gen = sub.add_parser("gen-data", help="write clean and noisy observables")
    p_gen.add_argument("config")
    p_gen.add_argument("--seed", type=int, help="override the config seed")
    add_common(p_gen)
    return parser


def _resolve_outdir(flag_value, cfg_outputs) -> str | None:
    return flag_value or cfg_outputs or os.environ.get("EPIFIT_OUTPUT")


def _say(args, *parts):
    if not getattr(args, "quiet", False):
        print(*parts)


def _cmd_validate(args) -> int:
    load_config(args.config)
    print(f"{args.config}: OK")
    return EXIT_OK


def _cmd_run(args) -> int:
    cfg = load_config(args.config, seed_override=args.seed)
    outdir = _resolve_outdir(args.output, cfg.outputs)
    if outdir is None:
        print("error: no output directory (use --output, the config's 'outputs' "
              "field, or EPIFIT_OUTPUT)", file=sys.stderr)
        return EXIT_CONFIG
    cfg = dataclasses.replace(cfg, outputs=None)
    report = run_experiment(cfg, threads=max(1, args.threads))
    write_report(report, outdir)
    _say(args, f"model={cfg.model} seed={cfg.seed} k={cfg.k} "
               f"t_train={cfg.t_train:g} horizon={cfg.horizon:g}")
    for est, run in report.runs.items():
        eff = run.ensemble.k
        extra = ""
        if est == "mcmc":
            psrf = run.diagnostics.get("psrf")
            if psrf:
                extra = f" psrf_max={max(psrf):.4f}"
            extra += f" accept={run.diagnostics.get('acceptance_rate', 0):.3f}"
        _say(args, f"  {est}: ensemble k={eff}{extra}")
    for stage, msg in report.errors.items():
        print(f"  {stage}: FAILED ({msg})", file=sys.stderr)
    if report.hessian is not None:
        _say(args, f"  eigengap: {report.hessian.eigengap_log10:.3f} at index "
                   f"{report.hessian.eigengap_index}")
    _say(args, f"wrote {outdir}/")
    return EXIT_RUNTIME if report.errors else EXIT_OK


def _read_params_file(path: str) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"{path}:{exc.lineno}:{exc.colno}: malformed JSON: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected an object of parameter values")
    return doc


def _cmd_check_symmetry(args) -> int:
    doc = _read_params_file(args.params_file)
    try:
        if args.model == "seir":
            if "N" not in doc and "R0" in doc:
                doc = dict(doc)
                doc["N"] = doc["S0"] + doc["E0"] + doc["I0"] + doc.pop("R0")
            p = SeirParams(**doc)
            pair = seir_symmetry_pair(p)
            horizon = args.horizon if args.horizon is not None else 60.0
        else:
            p = FourthAParams(**doc)
            pair = eaihrd_symmetry_pair(p)
            horizon = args.horizon if args.horizon is not None else 180.0
    except TypeError as exc:
        raise ConfigError(f"{args.params_file}: {exc}") from None

    partner = pair.partner
    if args.model == "seir":
        s0 = round(partner.S0)
        e0 = round(partner.E0)
        r0 = partner.N - s0 - e0 - partner.I0
        print(f"partner: beta={partner.beta:g} sigma={partner.sigma:g} "
              f"gamma={partner.gamma:g} S0={partner.S0:.6g} E0={partner.E0:.6g} "
              f"I0={partner.I0:g} R0={partner.R0:.6g}")
        print(f"rounded: S0={s0:.0f} E0={e0:.0f} R0={r0:.0f}")
    else:
        print(f"partner: F={partner.F:g} R2={partner.R2:g} R3={partner.R3:g} "
              f"C1={partner.C1:.6g} C2={partner.C2:.6g} r1={partner.r1:g} "
              f"alpha={partner.alpha:g} Atilde0={partner.Atilde0:.6g}")
    rep = verify_symmetry(pair, horizon, args.tol)
    if rep.ok:
        print(f"max deviation < {args.tol:g} over {horizon:g} days "
              f"(observed {rep.max_rel_deviation:.3e})")
        return EXIT_OK
    print(f"symmetry violated: max relative deviation "
          f"{rep.max_rel_deviation:.3e} at t={rep.time_of_max:g} "
          f"(tol {args.tol:g})", file=sys.stderr)
    return EXIT_RUNTIME


def _cmd_hessian(args) -> int:
    cfg = load_config(args.config)
    binding, exact_q, _ = resolve_model(cfg)
    report = loss_hessian(binding, exact_q, cfg.space.free_names,
                          daily_grid(cfg.horizon))
    print("eigenvalues (descending):")
    for lam in report.eigenvalues:
        print(f"  {lam:.6e}")
    print(f"eigengap_log10={report.eigengap_log10:.4f} "
          f"at index {report.eigengap_index} "
          f"(between {report.eigenvalues[report.eigengap_index]:.3e} "
          f"and {report.eigenvalues[report.eigengap_index + 1]:.3e})")
    outdir = _resolve_outdir(args.output, cfg.outputs)
    if outdir:
        out = Path(outdir)
        out.mkdir(parents=True, exist_ok=True)
        lines = ["row," + ",".join(report.parameter_names)]
        for i, name in enumerate(report.parameter_names):
            lines.append(name + "," + ",".join(format(v, ".17g")
                                               for v in report.matrix[i]))
        lines.append("eigenvalues," + ",".join(format(v, ".17g")
                                               for v in report.eigenvalues))
        lines.append(f"eigengap_log10,{report.eigengap_log10:.17g}")
        lines.append(f"eigengap_index,{report.eigengap_index}")
        (out / "hessian.csv").write_text("\n".join(lines) + "\n")
        _say(args, f"wrote {out / 'hessian.csv'}")
    return EXIT_OK


def _cmd_gen_data(args) -> int:
    cfg = load_config(args.config, seed_override=args.seed)
    outdir = _resolve_outdir(args.output, cfg.outputs)
    if outdir is None:
        print("error: no output directory (use --output, the config's 'outputs' "
              "field, or EPIFIT_OUTPUT)", file=sys.stderr)
        return EXIT_CONFIG
    binding, _, generate = resolve_model(cfg)
    grid = daily_grid(cfg.horizon)
    clean = generate(grid)
    reported = apply_noise(clean, cfg.data_noise)
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    write_series_csv(out / "data_clean.csv", clean, [binding.observable_name])
    write_series_csv(out / "data_reported.csv", reported, [binding.observable_name])
    _say(args, f"wrote {out / 'data_clean.csv'} and {out / 'data_reported.csv'} "
               f"({clean.n_points} points, noise sigma={cfg.data_noise.sigma:g})")
    return EXIT_OK


_COMMANDS = {
    "run": _cmd_run,
    "validate": _cmd_validate,
    "check-symmetry": _cmd_check_symmetry,
    "hessian": _cmd_hessian,
    "gen-data": _cmd_gen_data,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad flags; map to the config-error code
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    np.seterr(all="ignore")  # estimator objectives handle non-finite values
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def entrypoint() -> None:
    sys.exit(main())
