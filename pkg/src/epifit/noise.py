"""Multiplicative observation-noise structures for synthetic data and bootstrap.

Two structures:

- ``level``      each value d_i is replaced by d_i * (1 + eps_i);
- ``increment``  each first difference is scaled by (1 + eps_i) and the series
                 re-accumulated from its first value (which is kept exact).

eps_i are i.i.d. N(0, sigma^2) draws from a generator seeded by the spec, so a
given (series, spec) pair always produces the same output.  Values are not
clipped to be nonnegative; objectives that need positivity reject such points
themselves.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ode import TimeSeries

__all__ = ["NoiseSpec", "apply_increment_noise", "apply_level_noise", "apply_noise"]


@dataclass(frozen=True)
class NoiseSpec:
    structure: str  # "level" | "increment"
    sigma: float
    seed: int

    def __post_init__(self):
        if self.structure not in ("level", "increment"):
            raise ValueError(f"unknown noise structure {self.structure!r}")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")

    def with_seed(self, seed) -> "NoiseSpec":
        return NoiseSpec(self.structure, self.sigma, seed)


def _rng(spec: NoiseSpec) -> np.random.Generator:
    return np.random.default_rng(spec.seed)


def apply_level_noise(clean: TimeSeries, spec: NoiseSpec) -> TimeSeries:
    """Multiply every value by an independent N(1, sigma^2) factor."""
    if spec.sigma == 0.0:
        return TimeSeries(clean.times.copy(), clean.values.copy())
    eps = _rng(spec).standard_normal(clean.values.shape)
    return TimeSeries(clean.times.copy(), clean.values * (1.0 + spec.sigma * eps))


def apply_increment_noise(clean: TimeSeries, spec: NoiseSpec) -> TimeSeries:
    """Scale first differences by N(1, sigma^2) factors and re-accumulate.

    d_0 = clean_0 exactly and d_i = d_{i-1} + (clean_i - clean_{i-1})(1+eps_i),
    applied per column.  Zero increments absorb the noise unchanged.
    """
    if spec.sigma == 0.0:
        return TimeSeries(clean.times.copy(), clean.values.copy())
    inc = np.diff(clean.values, axis=0)
    eps = _rng(spec).standard_normal(inc.shape)
    noisy_inc = inc * (1.0 + spec.sigma * eps)
    out = np.empty_like(clean.values)
    out[0] = clean.values[0]
    out[1:] = clean.values[0] + np.cumsum(noisy_inc, axis=0)
    return TimeSeries(clean.times.copy(), out)


def apply_noise(clean: TimeSeries, spec: NoiseSpec) -> TimeSeries:
    if spec.structure == "level":
        return apply_level_noise(clean, spec)
    return apply_increment_noise(clean, spec)
