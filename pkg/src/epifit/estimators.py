"""Estimation pipelines: multistart bounded optimization, parametric bootstrap,
and t-walk MCMC with PSRF convergence checking and chain thinning.

The local search is a derivative-free simplex method run in transformed
coordinates: every free parameter is mapped to [0, 1] (through log space when
its bounds span at least two decades), candidates are projected back into the
box by clipping, and the search stops when the simplex diameter falls below
``DIAM_TOL`` in those coordinates or the evaluation budget runs out.

The t-walk kernel keeps two coupled points and proposes with the four standard
moves (walk, traverse, blow, hop); both points' trajectories are recorded, and
the pair doubles as the two chains for the potential scale reduction factor.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .models import ModelBinding
from .noise import NoiseSpec, apply_noise
from .objectives import (
    ObjectiveSpec,
    ObjectiveUndefinedError,
    PriorSpec,
    masked_ratio_arrays,
    training_window,
)
from .ode import IntegrationDivergedError, TimeSeries, integrate
from .ode import _OK as _ODE_OK
from .ode import _run_core as _ode_run_core

__all__ = [
    "DIAM_TOL",
    "EstimateEnsemble",
    "FitProblem",
    "FitResult",
    "McmcChain",
    "McmcSettings",
    "OptimizationFailedError",
    "ParameterSpace",
    "PsrfUndefinedError",
    "SIGMA_L_BOUNDS",
    "bootstrap",
    "mcmc_estimate",
    "multistart_optimize",
    "psrf",
    "thin_chain",
    "twalk_sample",
]

SIGMA_L_BOUNDS = (1e-4, 2.0)
DIAM_TOL = 1e-8
MAX_EVALS_PER_RESTART = 2000
LOG_TRANSFORM_DECADES = 2.0


class OptimizationFailedError(RuntimeError):
    """No restart produced a finite objective value."""


class PsrfUndefinedError(ValueError):
    """Within-chain variance vanished; the scale reduction factor is undefined."""


# ---------------------------------------------------------------------------
# Parameter space
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParameterSpace:
    """Named parameters with bounds, optional pinned values, and the coordinate
    transform used by the optimizer (chosen automatically unless overridden)."""

    names: tuple
    lower: np.ndarray
    upper: np.ndarray
    fixed: dict = field(default_factory=dict)
    transform: tuple = ()

    @classmethod
    def create(cls, names: Sequence[str], lower: Sequence[float],
               upper: Sequence[float], fixed: Optional[dict] = None,
               transform: Optional[Sequence[str]] = None) -> "ParameterSpace":
        names = tuple(names)
        lower = np.asarray(lower, dtype=float)
        upper = np.asarray(upper, dtype=float)
        fixed = dict(fixed or {})
        unknown = set(fixed) - set(names)
        if unknown:
            raise ValueError(f"fixed values for unknown parameters: {sorted(unknown)}")
        if transform is None:
            transform = tuple(
                "log" if lower[i] > 0 and upper[i] / lower[i] >= 10 ** LOG_TRANSFORM_DECADES
                else "linear"
                for i in range(len(names)))
        else:
            transform = tuple(transform)
            if any(t not in ("linear", "log") for t in transform):
                raise ValueError("transform entries must be 'linear' or 'log'")
        for i, name in enumerate(names):
            if name not in fixed and not lower[i] < upper[i]:
                raise ValueError(f"{name}: lower bound {lower[i]:g} must be "
                                 f"below upper bound {upper[i]:g}")
            if transform[i] == "log" and lower[i] <= 0:
                raise ValueError(f"{name}: log transform needs positive bounds")
        return cls(names=names, lower=lower, upper=upper, fixed=fixed,
                   transform=transform)

    @property
    def free_names(self) -> tuple:
        return tuple(n for n in self.names if n not in self.fixed)

    @property
    def n_free(self) -> int:
        return len(self.free_names)

    def _free_idx(self) -> np.ndarray:
        return np.array([i for i, n in enumerate(self.names) if n not in self.fixed],
                        dtype=int)

    @property
    def free_lower(self) -> np.ndarray:
        return self.lower[self._free_idx()]

    @property
    def free_upper(self) -> np.ndarray:
        return self.upper[self._free_idx()]

    @property
    def free_transform(self) -> tuple:
        idx = self._free_idx()
        return tuple(self.transform[i] for i in idx)

    @cached_property
    def _embed_template(self) -> tuple:
        base = np.array([self.fixed.get(n, 0.0) for n in self.names], dtype=float)
        free_idx = self._free_idx()
        return base, free_idx

    def embed(self, q_free: np.ndarray) -> np.ndarray:
        """Full vector in ``names`` order from free values plus pinned ones."""
        base, free_idx = self._embed_template
        out = base.copy()
        out[free_idx] = q_free
        return out

    def free_subspace(self, extra: Optional[tuple] = None) -> "ParameterSpace":
        """Flat space over the free names, optionally appending one extra
        coordinate given as (name, lower, upper)."""
        names = list(self.free_names)
        lower = list(self.free_lower)
        upper = list(self.free_upper)
        transform = list(self.free_transform)
        if extra is not None:
            name, lo, hi = extra
            names.append(name)
            lower.append(lo)
            upper.append(hi)
            transform.append(
                "log" if lo > 0 and hi / lo >= 10 ** LOG_TRANSFORM_DECADES else "linear")
        return ParameterSpace(names=tuple(names), lower=np.asarray(lower),
                              upper=np.asarray(upper), fixed={},
                              transform=tuple(transform))

    # -- transformed ([0,1]-normalized, optionally logarithmic) coordinates --

    def to_internal(self, q: np.ndarray) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        lo, hi = self.free_lower, self.free_upper
        z = np.empty_like(q)
        for i, t in enumerate(self.free_transform):
            if t == "log":
                z[i] = (math.log(q[i]) - math.log(lo[i])) / (math.log(hi[i]) - math.log(lo[i]))
            else:
                z[i] = (q[i] - lo[i]) / (hi[i] - lo[i])
        return z

    def from_internal(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        lo, hi = self.free_lower, self.free_upper
        q = np.empty_like(z)
        for i, t in enumerate(self.free_transform):
            if t == "log":
                q[i] = math.exp(math.log(lo[i]) + z[i] * (math.log(hi[i]) - math.log(lo[i])))
            else:
                q[i] = lo[i] + z[i] * (hi[i] - lo[i])
        return q

    def sample_uniform(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.free_lower, self.free_upper)

    def contains(self, q_free: np.ndarray) -> bool:
        q_free = np.asarray(q_free, dtype=float)
        return bool(np.all(q_free >= self.free_lower) and np.all(q_free <= self.free_upper))


# ---------------------------------------------------------------------------
# Bounded simplex search and multistart driver
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FitResult:
    theta_hat: np.ndarray
    objective_value: float
    restarts_tried: int
    converged: bool
    names: tuple = ()
    n_evals: int = 0

    def as_dict(self) -> dict:
        return dict(zip(self.names, self.theta_hat))


def _nelder_mead_box(f: Callable[[np.ndarray], float], z0: np.ndarray,
                     max_evals: int, diam_tol: float):
    """Simplex search on [0,1]^n with clipping; returns (z, f, evals, converged)."""
    n = z0.shape[0]
    alpha, gamma, rho, shrink = 1.0, 2.0, 0.5, 0.5
    verts = np.empty((n + 1, n))
    verts[0] = np.clip(z0, 0.0, 1.0)
    step = 0.05
    for i in range(n):
        v = verts[0].copy()
        v[i] = v[i] + step if v[i] + step <= 1.0 else v[i] - step
        verts[i + 1] = v
    vals = np.empty(n + 1)
    nev = 0
    for i in range(n + 1):
        vals[i] = f(verts[i])
        nev += 1
    converged = False
    while nev < max_evals:
        order = np.argsort(vals, kind="stable")
        verts = verts[order]
        vals = vals[order]
        diam = np.max(np.abs(verts[1:] - verts[0]))
        if diam < diam_tol:
            converged = True
            break
        centroid = verts[:-1].mean(axis=0)
        zr = np.clip(centroid + alpha * (centroid - verts[-1]), 0.0, 1.0)
        fr = f(zr)
        nev += 1
        if fr < vals[0]:
            ze = np.clip(centroid + gamma * (centroid - verts[-1]), 0.0, 1.0)
            fe = f(ze)
            nev += 1
            if fe < fr:
                verts[-1], vals[-1] = ze, fe
            else:
                verts[-1], vals[-1] = zr, fr
        elif fr < vals[-2]:
            verts[-1], vals[-1] = zr, fr
        else:
            if fr < vals[-1]:
                zc = np.clip(centroid + rho * (zr - centroid), 0.0, 1.0)
            else:
                zc = np.clip(centroid + rho * (verts[-1] - centroid), 0.0, 1.0)
            fc = f(zc)
            nev += 1
            if fc < min(fr, vals[-1]):
                verts[-1], vals[-1] = zc, fc
            else:
                for i in range(1, n + 1):
                    verts[i] = verts[0] + shrink * (verts[i] - verts[0])
                    vals[i] = f(verts[i])
                    nev += 1
    best = int(np.argmin(vals))
    return verts[best], float(vals[best]), nev, converged


def multistart_optimize(objective: Callable[[np.ndarray], float],
                        space: ParameterSpace, n_restarts: int = 10,
                        seed=0, max_evals: int = MAX_EVALS_PER_RESTART,
                        diam_tol: float = DIAM_TOL) -> FitResult:
    """Best of ``n_restarts`` bounded simplex searches from uniform-random
    starts inside the box; deterministic for a given seed.

    The objective takes the free-parameter vector in original coordinates and
    returns a float (+inf where undefined).
    """
    rng = np.random.default_rng(seed)
    fz = lambda z: float(objective(space.from_internal(np.clip(z, 0.0, 1.0))))  # noqa: E731
    best_z = None
    best_f = np.inf
    best_conv = False
    total_ev = 0
    for _ in range(n_restarts):
        q0 = None
        for _try in range(50):
            cand = space.sample_uniform(rng)
            if np.isfinite(objective(cand)):
                q0 = cand
                break
        if q0 is None:
            continue
        z, fval, nev, conv = _nelder_mead_box(fz, space.to_internal(q0),
                                              max_evals, diam_tol)
        total_ev += nev
        if fval < best_f:
            best_z, best_f, best_conv = z, fval, conv
    if best_z is None or not np.isfinite(best_f):
        raise OptimizationFailedError(
            f"no finite objective found in {n_restarts} restarts")
    theta = space.from_internal(best_z)
    return FitResult(theta_hat=theta, objective_value=best_f,
                     restarts_tried=n_restarts, converged=best_conv,
                     names=space.names, n_evals=total_ev)


# ---------------------------------------------------------------------------
# Fit problems: model + data objective wiring
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FitProblem:
    """Binds a model, a parameter space over its quantities, an objective kind
    and a training window into callables the estimators drive."""

    binding: ModelBinding
    space: ParameterSpace
    objective_spec: ObjectiveSpec
    t_train: float

    def __post_init__(self):
        if self.space.names != self.binding.quantity_names:
            raise ValueError(
                f"space names {self.space.names} must equal the model quantities "
                f"{self.binding.quantity_names}")

    @property
    def search_space(self) -> ParameterSpace:
        if self.objective_spec.needs_sigma_l:
            return self.space.free_subspace(("sigma_L",) + SIGMA_L_BOUNDS)
        return self.space.free_subspace()

    def split_search_vector(self, q_search: np.ndarray):
        if self.objective_spec.needs_sigma_l:
            return np.asarray(q_search[:-1], float), float(q_search[-1])
        return np.asarray(q_search, float), self.objective_spec.sigma_L

    def prior(self) -> PriorSpec:
        s = self.search_space
        return PriorSpec.from_bounds(s.lower, s.upper)

    def model_values(self, q_search: np.ndarray, grid: np.ndarray) -> np.ndarray:
        q_model, _ = self.split_search_vector(q_search)
        q_full = self.space.embed(q_model)
        theta, x0 = self.binding.build_inputs(q_full)
        ts = integrate(self.binding.system, theta, x0,
                       self.binding.solver_config(grid))
        return ts.column(self.binding.observable_index)

    def state_trajectory(self, q_search: np.ndarray, grid: np.ndarray) -> TimeSeries:
        q_model, _ = self.split_search_vector(q_search)
        q_full = self.space.embed(q_model)
        return self.binding.trajectory(q_full, grid)

    def predict_observable(self, q_search: np.ndarray, grid: np.ndarray) -> TimeSeries:
        return TimeSeries(np.asarray(grid, float).copy(),
                          self.model_values(q_search, grid))

    def objective_fn(self, data: TimeSeries) -> Callable[[np.ndarray], float]:
        """Objective over the search vector for one reported data set.

        Windows the data once; integrates the model on the window grid per
        call.  Integration failures and undefined objective points map to
        +inf so the optimizer simply avoids them.
        """
        spec = self.objective_spec
        win = training_window(data, self.t_train)
        grid = win.times
        d_levels = win.values.ravel()
        if spec.data_transform == "increments":
            d_cmp = np.diff(d_levels)
        else:
            d_cmp = d_levels
        prior = self.prior() if spec.needs_prior else None
        # hot path: pre-resolve the solver config and model maps once
        binding = self.binding
        cfg_win = binding.solver_config(grid)
        obs_idx = binding.observable_index
        rhs = binding.system.rhs
        th_const, th_mat = binding.theta_const, binding.theta_mat
        x0_const, x0_mat = binding.x0_const, binding.x0_mat
        space = self.space
        needs_sigma_l = spec.needs_sigma_l

        def fn(q_search: np.ndarray) -> float:
            if needs_sigma_l:
                q_model = np.asarray(q_search[:-1], float)
                sigma_l = float(q_search[-1])
            else:
                q_model = np.asarray(q_search, float)
                sigma_l = spec.sigma_L
            q_full = space.embed(q_model)
            status, _, Y = _ode_run_core(rhs, th_const + th_mat @ q_full,
                                         x0_const + x0_mat @ q_full, cfg_win)
            if status != _ODE_OK:
                return np.inf
            m_levels = Y[:, obs_idx]
            if spec.data_transform == "increments":
                m_cmp_full = np.diff(m_levels)
                d_use, m_use, _ = masked_ratio_arrays(d_cmp, m_cmp_full)
            else:
                d_use, m_use = d_cmp, m_levels
            if d_use.size == 0:
                return np.inf
            try:
                if spec.kind == "log_sq":
                    if np.any(d_use <= 0) or np.any(m_use <= 0):
                        return np.inf
                    r = np.log(d_use) - np.log(m_use)
                    return float(np.dot(r, r))
                if spec.kind == "rel_sq":
                    if np.any(m_use == 0.0):
                        return np.inf
                    r = d_use / m_use - 1.0
                    return float(np.dot(r, r))
                # likelihood / posterior
                if sigma_l is None or sigma_l <= 0 or np.any(m_use <= 0):
                    return np.inf
                n = d_use.shape[0]
                r = d_use / m_use - 1.0
                val = (n * math.log(sigma_l) + float(np.sum(np.log(m_use)))
                       + float(np.dot(r, r)) / (2.0 * sigma_l ** 2))
                if spec.kind == "neg_log_posterior":
                    val += prior.neg_log_density(np.asarray(q_search, float))
                return val
            except (ObjectiveUndefinedError, FloatingPointError, ValueError):
                return np.inf

        return fn


# ---------------------------------------------------------------------------
# Parametric bootstrap
# ---------------------------------------------------------------------------


@dataclass
class EstimateEnsemble:
    """k estimate vectors (bootstrap replicates or thinned MCMC draws)."""

    draws: np.ndarray
    names: tuple
    source: str  # "bootstrap" | "mcmc"
    seed: int
    estimator_name: str = ""
    requested_k: int = 0
    failures: tuple = ()

    @property
    def k(self) -> int:
        return self.draws.shape[0]

    def column(self, name: str) -> np.ndarray:
        return self.draws[:, self.names.index(name)]


def _map_indexed(fn, n: int, threads: int) -> list:
    if threads <= 1 or n <= 1:
        return [fn(j) for j in range(n)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(n)))


def bootstrap(problem: FitProblem, reported_data: TimeSeries, noise: NoiseSpec,
              k: int, seed: int, n_restarts: int = 10, threads: int = 1,
              estimator_name: str = "") -> EstimateEnsemble:
    """Parametric bootstrap around the multistart fit of the reported data.

    (1) fit the reported data, (2) treat the model output at the fit as the
    numerical truth, (3) generate k noisy realizations with ``noise``, (4)
    refit each one.  Replicates whose refit fails are dropped and counted.
    Per-replicate RNG streams depend only on (seed, replicate index), so the
    result is identical at any thread count.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    space = problem.search_space
    fit0 = multistart_optimize(problem.objective_fn(reported_data), space,
                               n_restarts, seed=[seed, 0])
    truth = problem.predict_observable(fit0.theta_hat, reported_data.times)

    def refit(j: int):
        noisy = apply_noise(truth, noise.with_seed([seed, 1, j]))
        try:
            fit = multistart_optimize(problem.objective_fn(noisy), space,
                                      n_restarts, seed=[seed, 2, j])
            return fit.theta_hat, None
        except OptimizationFailedError as exc:
            return None, f"replicate {j}: {exc}"

    results = _map_indexed(refit, k, threads)
    rows = [r for r, _ in results if r is not None]
    failures = tuple(msg for _, msg in results if msg is not None)
    draws = np.array(rows) if rows else np.empty((0, len(space.names)))
    return EstimateEnsemble(draws=draws, names=space.names, source="bootstrap",
                            seed=seed, estimator_name=estimator_name,
                            requested_k=k, failures=failures)


# ---------------------------------------------------------------------------
# t-walk MCMC
# ---------------------------------------------------------------------------


@dataclass
class McmcChain:
    """Recorded t-walk trajectories: the two coupled points give two chains."""

    states: np.ndarray
    aux_states: np.ndarray
    log_posterior: np.ndarray
    acceptance_rate: float
    psrf: Optional[np.ndarray]
    names: tuple = ()


_TW_WEIGHTS = np.cumsum([0.4918, 0.4918, 0.0082, 0.0082])
_TW_AW = 1.5
_TW_AT = 6.0
_TW_N1 = 4


def _g_norm(h, center, sigma, phi):
    # negative log density of the selected coords of h around center, std sigma
    nphi = int(np.sum(phi))
    diff = (h - center)[phi]
    return (nphi / 2.0) * math.log(2.0 * math.pi) + nphi * math.log(sigma) \
        + float(np.dot(diff, diff)) / (2.0 * sigma ** 2)


def _twalk_run(neg_log_post, lower, upper, n_steps, rng, x, xp, ux, uxp):
    """Advance the coupled pair n_steps; returns trajectories and end state."""
    n = x.shape[0]
    pphi = min(n, _TW_N1) / n
    states = np.empty((n_steps, n))
    aux = np.empty((n_steps, n))
    logp = np.empty(n_steps)
    accepted = 0

    def in_box(v):
        return bool(np.all(v >= lower) and np.all(v <= upper))

    for it in range(n_steps):
        kerdraw = rng.uniform()
        kernel = int(np.searchsorted(_TW_WEIGHTS, kerdraw))
        move_first = rng.uniform() < 0.5
        cur, other = (x, xp) if move_first else (xp, x)
        u_cur = ux if move_first else uxp
        phi = rng.uniform(size=n) < pphi
        nphi = int(np.sum(phi))
        log_extra = 0.0
        y = None
        if nphi > 0:
            if kernel == 0:  # walk
                u = rng.uniform(size=n)
                z = (_TW_AW / (1.0 + _TW_AW)) * (_TW_AW * u ** 2 + 2.0 * u - 1.0)
                y = cur + phi * (cur - other) * z
            elif kernel == 1:  # traverse
                if rng.uniform() < (_TW_AT - 1.0) / (2.0 * _TW_AT):
                    beta = math.exp(math.log(rng.uniform()) / (1.0 + _TW_AT))
                else:
                    beta = math.exp(math.log(rng.uniform()) / (1.0 - _TW_AT))
                y = np.where(phi, other + beta * (other - cur), cur)
                log_extra = (nphi - 2.0) * math.log(beta)
            elif kernel == 2:  # blow
                sigma_f = float(np.max(phi * np.abs(other - cur)))
                if sigma_f > 0.0:
                    y = np.where(phi, other + sigma_f * rng.standard_normal(n), cur)
                    sigma_r = float(np.max(phi * np.abs(other - y)))
                    if sigma_r > 0.0:
                        log_extra = _g_norm(y, other, sigma_f, phi) \
                            - _g_norm(cur, other, sigma_r, phi)
                    else:
                        y = None
                else:
                    y = None
            else:  # hop
                sigma_f = float(np.max(phi * np.abs(other - cur))) / 3.0
                if sigma_f > 0.0:
                    y = np.where(phi, cur + sigma_f * rng.standard_normal(n), cur)
                    sigma_r = float(np.max(phi * np.abs(other - y))) / 3.0
                    if sigma_r > 0.0:
                        log_extra = _g_norm(y, cur, sigma_f, phi) \
                            - _g_norm(cur, y, sigma_r, phi)
                    else:
                        y = None
                else:
                    y = None
        if y is not None and in_box(y):
            u_y = float(neg_log_post(y))
            if np.isfinite(u_y):
                log_alpha = (u_cur - u_y) + log_extra
                if math.log(rng.uniform()) < log_alpha:
                    accepted += 1
                    if move_first:
                        x, ux = y, u_y
                    else:
                        xp, uxp = y, u_y
        states[it] = x
        aux[it] = xp
        logp[it] = -ux
    return states, aux, logp, accepted, x, xp, ux, uxp


def twalk_sample(neg_log_posterior: Callable[[np.ndarray], float],
                 space: Union[ParameterSpace, tuple], n_steps: int, seed,
                 init_pair: tuple, names: tuple = ()) -> McmcChain:
    """Run the t-walk for ``n_steps`` from two distinct starting points.

    ``space`` is either a flat ParameterSpace or a (lower, upper) pair;
    proposals leaving the box are rejected.  Raises ValueError when the
    posterior is not finite at both starting points.
    """
    if isinstance(space, ParameterSpace):
        lower, upper = space.free_lower, space.free_upper
        if not names:
            names = space.free_names
    else:
        lower, upper = (np.asarray(space[0], float), np.asarray(space[1], float))
    x = np.asarray(init_pair[0], dtype=float).copy()
    xp = np.asarray(init_pair[1], dtype=float).copy()
    if np.all(x == xp):
        raise ValueError("the two initial points must be distinct")
    ux = float(neg_log_posterior(x))
    uxp = float(neg_log_posterior(xp))
    if not (np.isfinite(ux) and np.isfinite(uxp)):
        raise ValueError("posterior must be finite at both initial points")
    rng = np.random.default_rng(seed)
    states, aux, logp, accepted, *_ = _twalk_run(
        neg_log_posterior, lower, upper, n_steps, rng, x, xp, ux, uxp)
    try:
        rfactor = psrf(states, aux, window=n_steps // 2)
    except PsrfUndefinedError:
        rfactor = None
    return McmcChain(states=states, aux_states=aux, log_posterior=logp,
                     acceptance_rate=accepted / n_steps, psrf=rfactor,
                     names=names)


def psrf(chain_a, chain_b, window: Optional[int] = None) -> np.ndarray:
    """Two-chain Gelman-Rubin potential scale reduction factor per parameter.

    Uses the last ``window`` samples of each chain (all of them by default):
    R = sqrt(((n-1)/n * W + (m+1)/(m n) * B) / W) with m = 2 chains.
    """
    a = chain_a.states if isinstance(chain_a, McmcChain) else np.asarray(chain_a, float)
    b = chain_b.states if isinstance(chain_b, McmcChain) else np.asarray(chain_b, float)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    n = min(a.shape[0], b.shape[0])
    if window is not None:
        n = min(n, int(window))
    if n < 2:
        raise ValueError("need at least two samples per chain")
    a = a[-n:]
    b = b[-n:]
    m = 2
    out = np.empty(a.shape[1])
    for j in range(a.shape[1]):
        var_a = np.var(a[:, j], ddof=1)
        var_b = np.var(b[:, j], ddof=1)
        W = 0.5 * (var_a + var_b)
        if W == 0.0:
            raise PsrfUndefinedError(f"zero within-chain variance for parameter {j}")
        means = np.array([a[:, j].mean(), b[:, j].mean()])
        B = n * np.var(means, ddof=1)
        V = (n - 1) / n * W + (m + 1) / (m * n) * B
        out[j] = math.sqrt(V / W)
    return out


def thin_chain(chain, n_keep: int, skip: int) -> EstimateEnsemble:
    """Every ``skip``-th state walking backward from the end, re-ordered
    chronologically; requires length >= n_keep * skip."""
    if isinstance(chain, McmcChain):
        states = chain.states
        names = chain.names
    else:
        states = np.asarray(chain, float)
        names = ()
    if states.ndim == 1:
        states = states[:, None]
    length = states.shape[0]
    if n_keep < 1 or skip < 1:
        raise ValueError("n_keep and skip must be positive")
    if length < n_keep * skip:
        raise ValueError(
            f"chain length {length} is below n_keep*skip = {n_keep * skip}")
    idx = length - 1 - skip * np.arange(n_keep)
    idx = idx[::-1]
    return EstimateEnsemble(draws=states[idx].copy(), names=tuple(names),
                            source="mcmc", seed=0, requested_k=n_keep)


# ---------------------------------------------------------------------------
# MCMC estimator driver: init from a fit, run to convergence or the cap, thin
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class McmcSettings:
    n_keep: int = 5000
    skip: int = 10
    psrf_threshold: float = 1.1
    max_steps: int = 200_000
    check_every: int = 20_000


def mcmc_estimate(problem: FitProblem, reported_data: TimeSeries,
                  settings: McmcSettings, seed: int, n_restarts: int = 10,
                  estimator_name: str = "mcmc"):
    """Posterior sampling for a fit problem (posterior objective required).

    The chain pair starts at the multistart optimum and a jittered copy, runs
    in blocks until every parameter's PSRF over the last half is below the
    threshold (and the chain is long enough to thin), or until ``max_steps``.
    Returns (ensemble, diagnostics).
    """
    if problem.objective_spec.kind != "neg_log_posterior":
        raise ValueError("MCMC estimation needs a neg_log_posterior objective")
    space = problem.search_space
    neg_log_post = problem.objective_fn(reported_data)
    fit = multistart_optimize(neg_log_post, space, n_restarts, seed=[seed, 10])
    rng = np.random.default_rng([seed, 11])
    lower, upper = space.lower, space.upper
    x0 = fit.theta_hat.copy()
    x1 = None
    for scale in (0.01, 0.05, 0.2):
        cand = np.clip(x0 + scale * (upper - lower) * rng.standard_normal(x0.shape[0]),
                       lower, upper)
        if np.any(cand != x0) and np.isfinite(neg_log_post(cand)):
            x1 = cand
            break
    if x1 is None:
        raise OptimizationFailedError("could not find a second finite start point")

    min_len = settings.n_keep * settings.skip
    ux, uxp = float(neg_log_post(x0)), float(neg_log_post(x1))
    x, xp = x0, x1
    blocks_s, blocks_a, blocks_l = [], [], []
    total = 0
    accepted_total = 0
    rhat = None
    while total < settings.max_steps:
        block = min(settings.check_every, settings.max_steps - total)
        s, a, l, acc, x, xp, ux, uxp = _twalk_run(
            neg_log_post, lower, upper, block, rng, x, xp, ux, uxp)
        blocks_s.append(s)
        blocks_a.append(a)
        blocks_l.append(l)
        total += block
        accepted_total += acc
        states = np.concatenate(blocks_s)
        aux = np.concatenate(blocks_a)
        try:
            rhat = psrf(states, aux, window=total // 2)
        except PsrfUndefinedError:
            rhat = None
        if total >= min_len and rhat is not None \
                and np.all(rhat < settings.psrf_threshold):
            break
    states = np.concatenate(blocks_s)
    aux = np.concatenate(blocks_a)
    logp = np.concatenate(blocks_l)
    chain = McmcChain(states=states, aux_states=aux, log_posterior=logp,
                      acceptance_rate=accepted_total / total, psrf=rhat,
                      names=space.names)
    if total < min_len:
        raise ValueError(
            f"max_steps {settings.max_steps} is below n_keep*skip = {min_len}")
    ensemble = thin_chain(chain, settings.n_keep, settings.skip)
    ensemble.seed = seed
    ensemble.estimator_name = estimator_name
    diagnostics = {
        "n_steps": total,
        "acceptance_rate": chain.acceptance_rate,
        "psrf": None if rhat is None else [float(v) for v in rhat],
        "converged": bool(rhat is not None
                          and np.all(rhat < settings.psrf_threshold)),
        "fit_objective": fit.objective_value,
    }
    return ensemble, diagnostics
