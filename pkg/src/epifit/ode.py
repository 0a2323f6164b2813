"""Runge-Kutta integration of first-order ODE systems and their variational equations.

Two solvers are provided:

- ``rk4_fixed``      classic fourth-order Runge-Kutta with a fixed step, sub-stepped
                     so that every output-grid time is hit exactly;
- ``rk45_adaptive``  Dormand-Prince 5(4) with PI-free step control and the standard
                     quartic dense-output interpolant evaluated on the output grid.

The stepper core is written once in a numba-compatible style and compiled twice:
as plain Python (any callable right-hand side) and under ``numba.njit`` (used
automatically when the right-hand side itself is an njit dispatcher).  Both paths
produce bit-identical trajectories, which the estimation layers rely on for
reproducibility.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from numba import njit
from numba.core.dispatcher import Dispatcher

__all__ = [
    "IntegrationDivergedError",
    "OdeSystem",
    "SensitivityTrajectory",
    "SolverConfig",
    "TimeSeries",
    "daily_grid",
    "integrate",
    "integrate_with_sensitivities",
]


class IntegrationDivergedError(RuntimeError):
    """The state became non-finite (or the solver stalled) at ``time``."""

    def __init__(self, time: float, detail: str = "non-finite state"):
        super().__init__(f"integration diverged at t={time:g}: {detail}")
        self.time = time
        self.detail = detail


@dataclass
class TimeSeries:
    """A uniformly or non-uniformly sampled trajectory.

    ``values`` has one row per time and one column per recorded quantity
    (full state for :func:`integrate`, a single observable elsewhere).
    """

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        if self.times.ndim != 1:
            raise ValueError("times must be one-dimensional")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")
        if self.values.shape[0] != self.times.shape[0]:
            raise ValueError(
                f"values has {self.values.shape[0]} rows for {self.times.shape[0]} times"
            )

    @property
    def n_points(self) -> int:
        return self.times.shape[0]

    def column(self, j: int) -> np.ndarray:
        return self.values[:, j]

    def select(self, j: int) -> "TimeSeries":
        """Single-column view of quantity ``j`` as a new series."""
        return TimeSeries(self.times, self.values[:, j : j + 1].copy())

    def window(self, t_max: float) -> "TimeSeries":
        """Restrict to times <= t_max (inclusive, with a small tolerance)."""
        mask = self.times <= t_max + 1e-9 * max(1.0, abs(t_max))
        return TimeSeries(self.times[mask], self.values[mask])


def daily_grid(horizon_days: float, t0: float = 0.0) -> np.ndarray:
    """Grid t0, t0+1, ..., t0+horizon (inclusive), in days."""
    n = int(round(horizon_days))
    return t0 + np.arange(n + 1, dtype=float)


@dataclass(frozen=True)
class SolverConfig:
    """Integrator selection and accuracy knobs.

    ``output_grid[0]`` is the initial time.  ``step`` only applies to the fixed
    method; ``rel_tol``/``abs_tol`` only to the adaptive one.
    """

    output_grid: np.ndarray
    method: str = "rk45_adaptive"
    step: float = 0.01
    rel_tol: float = 1e-8
    abs_tol: float = 1e-10
    max_steps: int = 200_000

    def __post_init__(self):
        grid = np.asarray(self.output_grid, dtype=float)
        object.__setattr__(self, "output_grid", grid)
        if grid.ndim != 1 or grid.shape[0] < 1:
            raise ValueError("output_grid must be a non-empty 1-D array")
        if grid.shape[0] > 1 and np.any(np.diff(grid) <= 0):
            raise ValueError("output_grid must be strictly increasing")
        if self.method not in ("rk4_fixed", "rk45_adaptive"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.method == "rk4_fixed" and self.step <= 0:
            raise ValueError("step must be positive")
        if self.method == "rk45_adaptive" and (self.rel_tol <= 0 or self.abs_tol < 0):
            raise ValueError("rel_tol must be positive and abs_tol nonnegative")


RhsFn = Callable[[float, np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class OdeSystem:
    """First-order system x' = f(t, x; theta) with optional analytic Jacobians.

    When ``jacobian_state``/``jacobian_params`` are absent, central finite
    differences of ``rhs`` are substituted for the variational equations.
    """

    dim: int
    rhs: RhsFn
    jacobian_state: Optional[RhsFn] = None
    jacobian_params: Optional[RhsFn] = None
    n_params: Optional[int] = None

    def jac_state(self, t: float, x: np.ndarray, theta: np.ndarray) -> np.ndarray:
        if self.jacobian_state is not None:
            return np.asarray(self.jacobian_state(t, x, theta))
        return _fd_jac_state(self.rhs, t, np.asarray(x, float), np.asarray(theta, float))

    def jac_params(self, t: float, x: np.ndarray, theta: np.ndarray) -> np.ndarray:
        if self.jacobian_params is not None:
            return np.asarray(self.jacobian_params(t, x, theta))
        return _fd_jac_params(self.rhs, t, np.asarray(x, float), np.asarray(theta, float))


@dataclass
class SensitivityTrajectory:
    """State sensitivities along a trajectory.

    ``d_state_d_params[i]`` is the dim x p matrix of derivatives with respect to
    the selected parameters at time i; ``d_state_d_ic[i]`` the dim x dim matrix
    with respect to the initial state (identity at the initial time).
    """

    d_state_d_params: np.ndarray
    d_state_d_ic: np.ndarray
    param_indices: np.ndarray


# ---------------------------------------------------------------------------
# Dormand-Prince 5(4) tableau, embedded-error weights and dense-output matrix.
# ---------------------------------------------------------------------------

_C = np.array([0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0])
_A = np.zeros((7, 7))
_A[1, 0] = 1.0 / 5.0
_A[2, 0] = 3.0 / 40.0
_A[2, 1] = 9.0 / 40.0
_A[3, 0] = 44.0 / 45.0
_A[3, 1] = -56.0 / 15.0
_A[3, 2] = 32.0 / 9.0
_A[4, 0] = 19372.0 / 6561.0
_A[4, 1] = -25360.0 / 2187.0
_A[4, 2] = 64448.0 / 6561.0
_A[4, 3] = -212.0 / 729.0
_A[5, 0] = 9017.0 / 3168.0
_A[5, 1] = -355.0 / 33.0
_A[5, 2] = 46732.0 / 5247.0
_A[5, 3] = 49.0 / 176.0
_A[5, 4] = -5103.0 / 18656.0
_A[6, 0] = 35.0 / 384.0
_A[6, 2] = 500.0 / 1113.0
_A[6, 3] = 125.0 / 192.0
_A[6, 4] = -2187.0 / 6784.0
_A[6, 5] = 11.0 / 84.0
_E = np.array([71.0 / 57600.0, 0.0, -71.0 / 16695.0, 71.0 / 1920.0,
               -17253.0 / 339200.0, 22.0 / 525.0, -1.0 / 40.0])
_P = np.array([
    [1.0, -8048581381.0 / 2820520608.0, 8663915743.0 / 2820520608.0,
     -12715105075.0 / 11282082432.0],
    [0.0, 0.0, 0.0, 0.0],
    [0.0, 131558114200.0 / 32700410799.0, -68118460800.0 / 10900136933.0,
     87487479700.0 / 32700410799.0],
    [0.0, -1754552775.0 / 470086768.0, 14199869525.0 / 1410260304.0,
     -10690763975.0 / 1880347072.0],
    [0.0, 127303824393.0 / 49829197408.0, -318862633887.0 / 49829197408.0,
     701980252875.0 / 199316789632.0],
    [0.0, -282668133.0 / 205662961.0, 2019193451.0 / 616988883.0,
     -1453857185.0 / 822651844.0],
    [0.0, 40617522.0 / 29380423.0, -110615467.0 / 29380423.0,
     69997945.0 / 29380423.0],
])

_OK, _NONFINITE, _MAXSTEPS, _STALLED = 0, 1, 2, 3


def _dopri5_core(rhs, theta, x0, t_out, rtol, atol, max_steps):
    # Single-source stepper: must stay inside the numba-supported subset.
    dim = x0.shape[0]
    n = t_out.shape[0]
    Y = np.empty((n, dim))
    for d in range(dim):
        Y[0, d] = x0[d]
    t = t_out[0]
    t_end = t_out[n - 1]
    y = x0.copy()
    yy = np.empty(dim)
    k = np.empty((7, dim))
    f0 = rhs(t, y, theta)
    finite = True
    for d in range(dim):
        k[0, d] = f0[d]
        if not np.isfinite(f0[d]):
            finite = False
    if not finite:
        return _NONFINITE, t, Y
    # Hairer-style initial step guess from the scaled state/derivative norms.
    d0 = 0.0
    d1 = 0.0
    for d in range(dim):
        sc = atol + rtol * abs(y[d])
        d0 += (y[d] / sc) ** 2
        d1 += (f0[d] / sc) ** 2
    d0 = np.sqrt(d0 / dim)
    d1 = np.sqrt(d1 / dim)
    if d0 < 1e-5 or d1 < 1e-5:
        h = 1e-6
    else:
        h = 0.01 * d0 / d1
    if h > t_end - t:
        h = t_end - t
    i_out = 1
    nsteps = 0
    while i_out < n:
        nsteps += 1
        if nsteps > max_steps:
            return _MAXSTEPS, t, Y
        if h > t_end - t:
            h = t_end - t
        if t + h == t:
            return _STALLED, t, Y
        for s in range(1, 7):
            for d in range(dim):
                acc = 0.0
                for j in range(s):
                    acc += _A[s, j] * k[j, d]
                yy[d] = y[d] + h * acc
            ks = rhs(t + _C[s] * h, yy, theta)
            for d in range(dim):
                k[s, d] = ks[d]
        # Row 6 of the tableau is the fifth-order solution itself (FSAL), so the
        # last stage input already equals y_new.
        en = 0.0
        for d in range(dim):
            ynd = y[d] + h * (_A[6, 0] * k[0, d] + _A[6, 2] * k[2, d]
                              + _A[6, 3] * k[3, d] + _A[6, 4] * k[4, d]
                              + _A[6, 5] * k[5, d])
            errd = h * (_E[0] * k[0, d] + _E[2] * k[2, d] + _E[3] * k[3, d]
                        + _E[4] * k[4, d] + _E[5] * k[5, d] + _E[6] * k[6, d])
            ay = abs(y[d])
            ayn = abs(ynd)
            sc = atol + rtol * (ay if ay > ayn else ayn)
            en += (errd / sc) ** 2
            yy[d] = ynd
        en = np.sqrt(en / dim)
        if not np.isfinite(en):
            return _NONFINITE, t + h, Y
        if en <= 1.0:
            t_new = t + h
            eps = 1e-12 * (1.0 if abs(t_new) < 1.0 else abs(t_new))
            while i_out < n and t_out[i_out] <= t_new + eps:
                s_ = (t_out[i_out] - t) / h
                s2 = s_ * s_
                s3 = s2 * s_
                s4 = s3 * s_
                for d in range(dim):
                    acc = 0.0
                    for j in range(7):
                        acc += k[j, d] * (_P[j, 0] * s_ + _P[j, 1] * s2
                                          + _P[j, 2] * s3 + _P[j, 3] * s4)
                    Y[i_out, d] = y[d] + h * acc
                i_out += 1
            t = t_new
            for d in range(dim):
                y[d] = yy[d]
                k[0, d] = k[6, d]
            if en == 0.0:
                fac = 10.0
            else:
                fac = 0.9 * en ** -0.2
                if fac > 10.0:
                    fac = 10.0
            h = h * fac
        else:
            fac = 0.9 * en ** -0.2
            if fac < 0.2:
                fac = 0.2
            h = h * fac
    return _OK, t_end, Y


def _rk4_core(rhs, theta, x0, t_out, step, max_steps):
    dim = x0.shape[0]
    n = t_out.shape[0]
    Y = np.empty((n, dim))
    y = x0.copy()
    for d in range(dim):
        Y[0, d] = x0[d]
    yy = np.empty(dim)
    nsteps = 0
    for i in range(1, n):
        t0 = t_out[i - 1]
        t1 = t_out[i]
        span = t1 - t0
        nsub = int(np.ceil(span / step - 1e-12))
        if nsub < 1:
            nsub = 1
        h = span / nsub
        t = t0
        for _ in range(nsub):
            nsteps += 1
            if nsteps > max_steps:
                return _MAXSTEPS, t, Y
            k1 = rhs(t, y, theta)
            for d in range(dim):
                yy[d] = y[d] + 0.5 * h * k1[d]
            k2 = rhs(t + 0.5 * h, yy, theta)
            for d in range(dim):
                yy[d] = y[d] + 0.5 * h * k2[d]
            k3 = rhs(t + 0.5 * h, yy, theta)
            for d in range(dim):
                yy[d] = y[d] + h * k3[d]
            k4 = rhs(t + h, yy, theta)
            finite = True
            for d in range(dim):
                y[d] = y[d] + (h / 6.0) * (k1[d] + 2.0 * k2[d] + 2.0 * k3[d] + k4[d])
                if not np.isfinite(y[d]):
                    finite = False
            t += h
            if not finite:
                return _NONFINITE, t, Y
        for d in range(dim):
            Y[i, d] = y[d]
    return _OK, t_out[n - 1], Y


_dopri5_py = _dopri5_core
_dopri5_jit = njit(nogil=True)(_dopri5_core)
_rk4_py = _rk4_core
_rk4_jit = njit(nogil=True)(_rk4_core)


def _is_jitted(fn) -> bool:
    return isinstance(fn, Dispatcher)


def _run_core(rhs, theta, x0, cfg: SolverConfig):
    jit = _is_jitted(rhs)
    if cfg.method == "rk45_adaptive":
        core = _dopri5_jit if jit else _dopri5_py
        return core(rhs, theta, x0, cfg.output_grid, cfg.rel_tol, cfg.abs_tol,
                    cfg.max_steps)
    core = _rk4_jit if jit else _rk4_py
    return core(rhs, theta, x0, cfg.output_grid, cfg.step, cfg.max_steps)


def _raise_on_status(status: int, t_fail: float):
    if status == _NONFINITE:
        raise IntegrationDivergedError(t_fail)
    if status == _MAXSTEPS:
        raise IntegrationDivergedError(t_fail, "step budget exhausted")
    if status == _STALLED:
        raise IntegrationDivergedError(t_fail, "step size underflow")


def integrate(system: OdeSystem, params: Sequence[float], x0: Sequence[float],
              cfg: SolverConfig) -> TimeSeries:
    """Integrate ``system`` and return the full state at ``cfg.output_grid``."""
    theta = np.ascontiguousarray(params, dtype=float)
    x0 = np.ascontiguousarray(x0, dtype=float)
    if x0.shape[0] != system.dim:
        raise ValueError(f"x0 has length {x0.shape[0]}, system dim is {system.dim}")
    status, t_fail, Y = _run_core(system.rhs, theta, x0, cfg)
    _raise_on_status(status, t_fail)
    return TimeSeries(cfg.output_grid.copy(), Y)


# ---------------------------------------------------------------------------
# Variational (sensitivity) equations as an augmented system.
# ---------------------------------------------------------------------------

_FD_REL = 1e-6


def _fd_jac_state(rhs, t, x, theta):
    dim = x.shape[0]
    J = np.empty((dim, dim))
    for i in range(dim):
        delta = _FD_REL * max(1.0, abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += delta
        xm[i] -= delta
        J[:, i] = (np.asarray(rhs(t, xp, theta)) - np.asarray(rhs(t, xm, theta))) / (2 * delta)
    return J


def _fd_jac_params(rhs, t, x, theta):
    dim = x.shape[0]
    p = theta.shape[0]
    J = np.empty((dim, p))
    for i in range(p):
        delta = _FD_REL * max(1.0, abs(theta[i]))
        tp = theta.copy()
        tm = theta.copy()
        tp[i] += delta
        tm[i] -= delta
        J[:, i] = (np.asarray(rhs(t, x, tp)) - np.asarray(rhs(t, x, tm))) / (2 * delta)
    return J


def _augmented_rhs(system: OdeSystem, psel: np.ndarray):
    """Right-hand side of [x, dx/dtheta_sel, dx/dx0] as one flat system.

    Returns an njit dispatcher when the system's rhs and both Jacobians are
    jitted (so the fast integrator path applies), else a plain closure.
    """
    dim = system.dim
    nsel = psel.shape[0]
    rhs = system.rhs
    jac_x = system.jacobian_state
    jac_p = system.jacobian_params
    use_jit = (_is_jitted(rhs) and _is_jitted(jac_x) and _is_jitted(jac_p))
    if jac_x is None:
        jac_x = lambda t, x, th: _fd_jac_state(rhs, t, x, th)  # noqa: E731
    if jac_p is None:
        jac_p = lambda t, x, th: _fd_jac_params(rhs, t, x, th)  # noqa: E731

    def aug(t, z, theta):
        x = z[:dim]
        out = np.empty(dim * (1 + nsel + dim))
        f = rhs(t, x, theta)
        Jx = jac_x(t, x, theta)
        Jp = jac_p(t, x, theta)
        for i in range(dim):
            out[i] = f[i]
        base = dim
        for i in range(dim):
            for j in range(nsel):
                acc = Jp[i, psel[j]]
                for m in range(dim):
                    acc += Jx[i, m] * z[base + m * nsel + j]
                out[base + i * nsel + j] = acc
        base2 = dim + dim * nsel
        for i in range(dim):
            for j in range(dim):
                acc = 0.0
                for m in range(dim):
                    acc += Jx[i, m] * z[base2 + m * dim + j]
                out[base2 + i * dim + j] = acc
        return out

    if use_jit:
        return njit(nogil=True)(aug)
    return aug


def integrate_with_sensitivities(
    system: OdeSystem,
    params: Sequence[float],
    x0: Sequence[float],
    cfg: SolverConfig,
    free_param_indices: Optional[Sequence[int]] = None,
) -> tuple[TimeSeries, SensitivityTrajectory]:
    """Integrate the system together with its variational equations.

    The sensitivity of the state to the initial condition starts at the
    identity; the sensitivity to the parameters starts at zero (the initial
    condition passed here is treated as parameter-independent — callers with
    parameter-dependent initial states apply the chain rule on top).
    """
    theta = np.ascontiguousarray(params, dtype=float)
    x0 = np.ascontiguousarray(x0, dtype=float)
    dim = system.dim
    if x0.shape[0] != dim:
        raise ValueError(f"x0 has length {x0.shape[0]}, system dim is {dim}")
    if free_param_indices is None:
        psel = np.arange(theta.shape[0], dtype=np.int64)
    else:
        psel = np.ascontiguousarray(free_param_indices, dtype=np.int64)
    nsel = psel.shape[0]

    aug = _augmented_rhs(system, psel)
    z0 = np.zeros(dim * (1 + nsel + dim))
    z0[:dim] = x0
    base2 = dim + dim * nsel
    for i in range(dim):
        z0[base2 + i * dim + i] = 1.0

    jit = _is_jitted(aug)
    if cfg.method == "rk45_adaptive":
        core = _dopri5_jit if jit else _dopri5_py
        status, t_fail, Z = core(aug, theta, z0, cfg.output_grid, cfg.rel_tol,
                                 cfg.abs_tol, cfg.max_steps)
    else:
        core = _rk4_jit if jit else _rk4_py
        status, t_fail, Z = core(aug, theta, z0, cfg.output_grid, cfg.step,
                                 cfg.max_steps)
    _raise_on_status(status, t_fail)

    n = cfg.output_grid.shape[0]
    states = Z[:, :dim].copy()
    d_params = Z[:, dim:base2].reshape(n, dim, nsel).copy()
    d_ic = Z[:, base2:].reshape(n, dim, dim).copy()
    traj = TimeSeries(cfg.output_grid.copy(), states)
    return traj, SensitivityTrajectory(d_params, d_ic, psel)
