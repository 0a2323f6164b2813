"""Experiment-config files: a JSON document whose nested sections mirror the
ExperimentConfig fields exactly.  Unknown keys anywhere are hard errors, so a
typo in a bound name cannot silently loosen an experiment."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import numpy as np

from .estimators import McmcSettings, ParameterSpace
from .experiment import ExperimentConfig, resolve_model
from .models import fourtha_binding, seir_binding
from .noise import NoiseSpec
from .objectives import ObjectiveSpec

__all__ = ["ConfigError", "load_config", "parse_config"]


class ConfigError(ValueError):
    """Malformed or invalid experiment configuration."""


_TOP_KEYS = {"model", "exact_params", "space", "data_noise", "bootstrap_noise",
             "estimators", "t_train", "horizon", "k", "mcmc", "outputs", "seed",
             "objective", "non_observable", "n_restarts"}
_REQUIRED = {"model", "exact_params", "space", "data_noise", "bootstrap_noise",
             "estimators", "t_train", "horizon", "k", "seed"}
_NOISE_KEYS = {"structure", "sigma", "seed"}
_MCMC_KEYS = {"n_keep", "skip", "psrf_threshold", "max_steps", "check_every"}
_OBJECTIVE_KEYS = {"kind", "data_transform", "sigma_L"}
_SPACE_ENTRY_KEYS = {"lower", "upper", "fixed", "transform"}

_MODEL_QUANTITIES = {
    "seir": seir_binding().quantity_names,
    "fourtha": fourtha_binding().quantity_names,
    "eaihrd": fourtha_binding().quantity_names,  # estimation runs in reduced form
}


def _check_keys(section: dict, allowed: set, path: str) -> None:
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} in {path}; allowed: "
                          f"{sorted(allowed)}")


def _require(section: dict, key: str, path: str):
    if key not in section:
        raise ConfigError(f"missing required key {key!r} in {path}")
    return section[key]


def _number(value, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{path} must be a number, got {value!r}")
    return float(value)


def _parse_noise(section, default_structure: str, default_seed: int,
                 path: str) -> NoiseSpec:
    if not isinstance(section, dict):
        raise ConfigError(f"{path} must be an object")
    _check_keys(section, _NOISE_KEYS, path)
    sigma = _number(_require(section, "sigma", path), f"{path}.sigma")
    structure = section.get("structure", default_structure)
    seed = section.get("seed", default_seed)
    try:
        return NoiseSpec(structure=structure, sigma=sigma, seed=int(seed))
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _parse_space(section, model: str) -> ParameterSpace:
    if not isinstance(section, dict):
        raise ConfigError("space must be an object keyed by parameter name")
    names = _MODEL_QUANTITIES[model]
    unknown = sorted(set(section) - set(names))
    if unknown:
        raise ConfigError(f"space has unknown parameter(s) {unknown} for model "
                          f"{model!r}; expected from {list(names)}")
    missing = [n for n in names if n not in section]
    if missing:
        raise ConfigError(f"space is missing parameter(s) {missing} for model "
                          f"{model!r} (give bounds or a fixed value for each)")
    lower = np.empty(len(names))
    upper = np.empty(len(names))
    fixed = {}
    transform = []
    explicit_transform = False
    for i, name in enumerate(names):
        entry = section[name]
        path = f"space.{name}"
        if not isinstance(entry, dict):
            raise ConfigError(f"{path} must be an object")
        _check_keys(entry, _SPACE_ENTRY_KEYS, path)
        if "fixed" in entry:
            extra = set(entry) - {"fixed"}
            if extra:
                raise ConfigError(f"{path}: fixed entries take no other keys "
                                  f"(got {sorted(extra)})")
            v = _number(entry["fixed"], f"{path}.fixed")
            fixed[name] = v
            lower[i] = v
            upper[i] = v  # never searched; bounds checks skip fixed names
            transform.append("linear")
            continue
        lo = _number(_require(entry, "lower", path), f"{path}.lower")
        hi = _number(_require(entry, "upper", path), f"{path}.upper")
        lower[i] = lo
        upper[i] = hi
        if "transform" in entry:
            explicit_transform = True
            transform.append(entry["transform"])
        else:
            transform.append(None)
    if explicit_transform:
        auto = ParameterSpace.create(names, lower, upper, fixed=fixed)
        merged = tuple(t if t is not None else auto.transform[i]
                       for i, t in enumerate(transform))
        try:
            return ParameterSpace.create(names, lower, upper, fixed=fixed,
                                         transform=merged)
        except ValueError as exc:
            raise ConfigError(f"space: {exc}") from None
    try:
        return ParameterSpace.create(names, lower, upper, fixed=fixed)
    except ValueError as exc:
        raise ConfigError(f"space: {exc}") from None


def parse_config(doc: dict, source: str = "<config>") -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError(f"{source}: top level must be an object")
    _check_keys(doc, _TOP_KEYS, "the top level")
    for key in sorted(_REQUIRED):
        _require(doc, key, "the top level")

    model = doc["model"]
    if model not in _MODEL_QUANTITIES:
        raise ConfigError(f"model must be one of ['eaihrd', 'fourtha', 'seir'], "
                          f"got {model!r}")
    exact = doc["exact_params"]
    if not isinstance(exact, dict):
        raise ConfigError("exact_params must be an object")
    exact = {k: _number(v, f"exact_params.{k}") for k, v in exact.items()}

    seed = doc["seed"]
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ConfigError(f"seed must be an integer, got {seed!r}")

    estimators = doc["estimators"]
    if (not isinstance(estimators, list) or not estimators
            or not all(isinstance(e, str) for e in estimators)):
        raise ConfigError("estimators must be a non-empty list of names")

    space = _parse_space(doc["space"], model)
    default_structure = "level" if model == "seir" else "increment"
    data_noise = _parse_noise(doc["data_noise"], default_structure,
                              _default_noise_seed(seed, 0), "data_noise")
    bootstrap_noise = _parse_noise(doc["bootstrap_noise"], default_structure,
                                   _default_noise_seed(seed, 1), "bootstrap_noise")

    mcmc = McmcSettings()
    if "mcmc" in doc:
        sec = doc["mcmc"]
        if not isinstance(sec, dict):
            raise ConfigError("mcmc must be an object")
        _check_keys(sec, _MCMC_KEYS, "mcmc")
        kwargs = {}
        for key in _MCMC_KEYS:
            if key in sec:
                kwargs[key] = (float(sec[key]) if key == "psrf_threshold"
                               else int(sec[key]))
        mcmc = McmcSettings(**kwargs)

    objective = None
    if "objective" in doc:
        sec = doc["objective"]
        if not isinstance(sec, dict):
            raise ConfigError("objective must be an object")
        _check_keys(sec, _OBJECTIVE_KEYS, "objective")
        try:
            objective = ObjectiveSpec(
                kind=sec.get("kind", "rel_sq"),
                data_transform=sec.get(
                    "data_transform",
                    "levels" if model == "seir" else "increments"),
                sigma_L=sec.get("sigma_L"))
        except ValueError as exc:
            raise ConfigError(f"objective: {exc}") from None

    cfg = ExperimentConfig(
        model=model,
        exact_params=exact,
        space=space,
        data_noise=data_noise,
        bootstrap_noise=bootstrap_noise,
        estimators=tuple(estimators),
        t_train=_number(doc["t_train"], "t_train"),
        horizon=_number(doc["horizon"], "horizon"),
        k=int(doc["k"]),
        mcmc=mcmc,
        outputs=doc.get("outputs"),
        seed=seed,
        objective=objective,
        non_observable=doc.get("non_observable"),
        n_restarts=int(doc.get("n_restarts", 10)),
    )
    try:
        cfg.validate()
        resolve_model(cfg)
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return cfg


def _default_noise_seed(master: int, stream: int) -> int:
    return int(np.random.SeedSequence((int(master), 900 + stream))
               .generate_state(1)[0])


def load_config(path, seed_override: Optional[int] = None,
                output_override: Optional[str] = None) -> ExperimentConfig:
    """Read, parse and validate a JSON config file.

    Raises ConfigError with a line-numbered diagnostic on malformed JSON.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"{path}:{exc.lineno}:{exc.colno}: malformed JSON: {exc.msg}") from None
    override: dict = {}
    if seed_override is not None:
        override["seed"] = int(seed_override)
    if output_override is not None:
        override["outputs"] = str(output_override)
    if override:
        doc = dict(doc, **override)
    return parse_config(doc, source=str(path))
