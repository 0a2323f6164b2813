"""Objective functions: deterministic errors, likelihoods, priors, posteriors.

All objectives compare a reported series ``d`` against a model series ``d_tilde``
elementwise and sum.  Constant terms that do not move the optimum are dropped,
so likelihood/posterior values may be negative.  The training window is applied
here (see :func:`training_window`) before any comparison; estimators receive
already-windowed data.

For increment-transformed objectives, ratio terms with |model increment| below
``INCREMENT_FLOOR`` are excluded from the sums; :func:`masked_ratio_arrays`
reports how many points were dropped.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .ode import TimeSeries

__all__ = [
    "INCREMENT_FLOOR",
    "ObjectiveSpec",
    "ObjectiveUndefinedError",
    "PriorSpec",
    "increments_view",
    "log_sq_loss",
    "masked_ratio_arrays",
    "neg_log_likelihood",
    "neg_log_posterior",
    "rel_sq_loss",
    "training_window",
]

INCREMENT_FLOOR = 1e-15

ArrayLike = Union[TimeSeries, np.ndarray]


class ObjectiveUndefinedError(ValueError):
    """The objective cannot be evaluated at some index (e.g. log of <= 0)."""

    def __init__(self, index: int, detail: str):
        super().__init__(f"objective undefined at index {index}: {detail}")
        self.index = index


def _values(x: ArrayLike) -> np.ndarray:
    if isinstance(x, TimeSeries):
        return x.values.ravel()
    return np.asarray(x, dtype=float).ravel()


def _pair(data: ArrayLike, model: ArrayLike) -> tuple[np.ndarray, np.ndarray]:
    d = _values(data)
    m = _values(model)
    if d.shape != m.shape:
        raise ValueError(f"series lengths differ: {d.shape[0]} vs {m.shape[0]}")
    return d, m


def log_sq_loss(data: ArrayLike, model: ArrayLike) -> float:
    """Sum of squared log residuals; every compared value must be positive."""
    d, m = _pair(data, model)
    bad = np.flatnonzero((d <= 0) | (m <= 0))
    if bad.size:
        i = int(bad[0])
        raise ObjectiveUndefinedError(i, f"nonpositive value (d={d[i]:g}, model={m[i]:g})")
    r = np.log(d) - np.log(m)
    return float(np.dot(r, r))


def rel_sq_loss(data: ArrayLike, model: ArrayLike) -> float:
    """Sum of squared relative errors |d/model - 1|^2; model values nonzero."""
    d, m = _pair(data, model)
    bad = np.flatnonzero(m == 0.0)
    if bad.size:
        raise ObjectiveUndefinedError(int(bad[0]), "zero model value")
    r = d / m - 1.0
    return float(np.dot(r, r))


def neg_log_likelihood(data: ArrayLike, model: ArrayLike, sigma_L: float) -> float:
    """Negative log of the normal relative-error likelihood, constants dropped:
    n*ln(sigma_L) + sum(ln model) + sum((d/model - 1)^2) / (2 sigma_L^2)."""
    if sigma_L <= 0:
        raise ValueError("sigma_L must be positive")
    d, m = _pair(data, model)
    bad = np.flatnonzero(m <= 0)
    if bad.size:
        i = int(bad[0])
        raise ObjectiveUndefinedError(i, f"nonpositive model value {m[i]:g}")
    n = d.shape[0]
    r = d / m - 1.0
    return float(n * np.log(sigma_L) + np.sum(np.log(m))
                 + np.dot(r, r) / (2.0 * sigma_L ** 2))


@dataclass(frozen=True)
class PriorSpec:
    """Independent Gaussian priors with mean (lb+ub)/2 and std (ub-lb)/6 per
    parameter, evaluated unnormalized (density defined on the whole real line)."""

    means: np.ndarray
    stds: np.ndarray

    @classmethod
    def from_bounds(cls, lower, upper) -> "PriorSpec":
        lower = np.asarray(lower, dtype=float)
        upper = np.asarray(upper, dtype=float)
        if np.any(upper <= lower):
            raise ValueError("upper bounds must exceed lower bounds")
        return cls(means=(lower + upper) / 2.0, stds=(upper - lower) / 6.0)

    def neg_log_density(self, theta) -> float:
        theta = np.asarray(theta, dtype=float)
        z = (theta - self.means) / self.stds
        return float(np.dot(z, z) / 2.0)


def neg_log_posterior(data: ArrayLike, model: ArrayLike, sigma_L: float,
                      theta, prior: PriorSpec) -> float:
    """Negative log posterior: negative log likelihood plus the Gaussian
    negative log prior of ``theta`` (additive constants dropped)."""
    return neg_log_likelihood(data, model, sigma_L) + prior.neg_log_density(theta)


def increments_view(series: TimeSeries) -> TimeSeries:
    """First differences, carried on the grid with the first point removed."""
    if series.n_points < 2:
        raise ValueError("increments need at least two points")
    return TimeSeries(series.times[1:], np.diff(series.values, axis=0))


def training_window(series: TimeSeries, t_train: float) -> TimeSeries:
    """Points with t <= t_init + t_train, t_init being the first time."""
    return series.window(series.times[0] + t_train)


def masked_ratio_arrays(data: np.ndarray, model: np.ndarray,
                        floor: float = INCREMENT_FLOOR):
    """Drop indices whose |model| is below ``floor`` (undefined ratio terms).

    Returns (data_kept, model_kept, n_excluded).  Used for increment
    objectives, where a flat model segment has no defined relative error.
    """
    data = np.asarray(data, float).ravel()
    model = np.asarray(model, float).ravel()
    keep = np.abs(model) >= floor
    return data[keep], model[keep], int(np.size(keep) - np.count_nonzero(keep))


@dataclass(frozen=True)
class ObjectiveSpec:
    """Which objective to run and on which view of the data.

    ``sigma_L`` is only meaningful for the likelihood/posterior kinds: None
    treats it as an extra estimated coordinate, a float pins it.
    """

    kind: str = "rel_sq"  # log_sq | rel_sq | neg_log_likelihood | neg_log_posterior
    data_transform: str = "levels"  # levels | increments
    sigma_L: Optional[float] = None

    KINDS = ("log_sq", "rel_sq", "neg_log_likelihood", "neg_log_posterior")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown objective kind {self.kind!r}")
        if self.data_transform not in ("levels", "increments"):
            raise ValueError(f"unknown data transform {self.data_transform!r}")
        if self.sigma_L is not None and self.sigma_L <= 0:
            raise ValueError("fixed sigma_L must be positive")

    @property
    def needs_sigma_l(self) -> bool:
        return (self.kind in ("neg_log_likelihood", "neg_log_posterior")
                and self.sigma_L is None)

    @property
    def needs_prior(self) -> bool:
        return self.kind == "neg_log_posterior"
