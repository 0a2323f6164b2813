"""Epidemic model definitions, observable maps, reduction and symmetry maps.

Three systems:

- SEIR with mass-action transmission ``beta*S*I/N`` and observable I(t);
- the six-compartment EAIHRD model with observable D(t) (cumulative fatalities);
- the reduced "4thA" form of EAIHRD: a fourth-order ODE in D embedded as five
  first-order states (D, D', D'', D''', Atilde) with observable D(t).

EAIHRD states here are stored as fractions of the total population (the
parameter ``N`` defaults to 1).  With unnormalized states of scale N and raw
transmission rates c_raw, the equivalent normalized rates are ``c = c_raw * N``;
all other rates are per-day and unchanged.

Each locally identifiable configuration has a partner parameter set producing
the identical observable; ``*_symmetry_partner`` computes it and
``verify_symmetry`` checks the observables numerically.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Union

import numpy as np
from numba import njit

from .ode import OdeSystem, SolverConfig, TimeSeries, daily_grid, integrate

__all__ = [
    "DegenerateSymmetryError",
    "EaihrdParams",
    "FourthAParams",
    "ModelBinding",
    "ReductionUndefinedError",
    "SeirParams",
    "SymmetryPair",
    "SymmetryReport",
    "eaihrd_symmetry_pair",
    "eaihrd_symmetry_partner",
    "eaihrd_system",
    "eaihrd_to_4tha",
    "fourtha_binding",
    "fourtha_system",
    "seir_binding",
    "seir_symmetry_pair",
    "seir_symmetry_partner",
    "seir_system",
    "verify_symmetry",
]


class DegenerateSymmetryError(ValueError):
    """The symmetry map is undefined (or the fixed-point map) at these values."""


class ReductionUndefinedError(ValueError):
    """The EAIHRD -> 4thA reduction needs positive a, s, h, d."""


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SeirParams:
    """SEIR rates (1/day; beta per capita via beta*S*I/N) and initial counts.

    R0 is derived as N - S0 - E0 - I0 and may be negative for symmetry
    partners; physical validity is a separate predicate from integrability.
    """

    beta: float
    sigma: float
    gamma: float
    S0: float
    E0: float
    I0: float
    N: float

    @classmethod
    def from_compartments(cls, beta, sigma, gamma, S0, E0, I0, R0) -> "SeirParams":
        return cls(beta, sigma, gamma, S0, E0, I0, S0 + E0 + I0 + R0)

    @property
    def R0(self) -> float:
        return self.N - self.S0 - self.E0 - self.I0

    def theta(self) -> np.ndarray:
        return np.array([self.beta, self.sigma, self.gamma, self.N])

    def x0(self) -> np.ndarray:
        return np.array([self.S0, self.E0, self.I0, self.R0])

    def is_physical(self) -> bool:
        return (min(self.beta, self.sigma, self.gamma) > 0
                and min(self.S0, self.E0, self.I0, self.R0) >= 0)


@dataclass(frozen=True)
class EaihrdParams:
    """EAIHRD rates (1/day) and normalized initial fractions.

    c1, c2 are in the normalized convention (see module docstring); with N=1
    they multiply population fractions directly.
    """

    a: float
    s: float
    r1: float
    r2: float
    r3: float
    h: float
    d: float
    c1: float
    c2: float
    A0: float
    I0: float
    H0: float
    R0: float
    D0: float
    E0: float
    N: float = 1.0

    def theta(self) -> np.ndarray:
        return np.array([self.a, self.s, self.r1, self.r2, self.r3,
                         self.h, self.d, self.c1, self.c2, self.N])

    def x0(self) -> np.ndarray:
        return np.array([self.A0, self.I0, self.H0, self.R0, self.D0, self.E0])


@dataclass(frozen=True)
class FourthAParams:
    """Reduced-model parameters: F=a+s, R2=r2+h, R3=r3+d, C1=a*c1/(hsd),
    C2=s*c2/(hsd), plus r1, the lumped constant alpha, initial D and its first
    three derivatives, and the scaled asymptomatic initial value Atilde0."""

    F: float
    R2: float
    R3: float
    C1: float
    C2: float
    r1: float
    alpha: float
    D0: float
    D1_0: float
    D2_0: float
    D3_0: float
    Atilde0: float

    def theta(self) -> np.ndarray:
        return np.array([self.F, self.R2, self.R3, self.C1, self.C2,
                         self.r1, self.alpha])

    def x0(self) -> np.ndarray:
        return np.array([self.D0, self.D1_0, self.D2_0, self.D3_0, self.Atilde0])


ModelParams = Union[SeirParams, EaihrdParams, FourthAParams]


# ---------------------------------------------------------------------------
# Right-hand sides and analytic Jacobians (njit so the fast solver path applies)
# ---------------------------------------------------------------------------


@njit(nogil=True, cache=True)
def _seir_rhs(t, x, th):
    out = np.empty(4)
    beta, sigma, gamma, N = th[0], th[1], th[2], th[3]
    S, E, I = x[0], x[1], x[2]
    inf = beta * S * I / N
    out[0] = -inf
    out[1] = inf - sigma * E
    out[2] = sigma * E - gamma * I
    out[3] = gamma * I
    return out


@njit(nogil=True, cache=True)
def _seir_jac_state(t, x, th):
    J = np.zeros((4, 4))
    beta, sigma, gamma, N = th[0], th[1], th[2], th[3]
    S, I = x[0], x[2]
    J[0, 0] = -beta * I / N
    J[0, 2] = -beta * S / N
    J[1, 0] = beta * I / N
    J[1, 1] = -sigma
    J[1, 2] = beta * S / N
    J[2, 1] = sigma
    J[2, 2] = -gamma
    J[3, 2] = gamma
    return J


@njit(nogil=True, cache=True)
def _seir_jac_params(t, x, th):
    J = np.zeros((4, 4))
    beta, N = th[0], th[3]
    S, E, I = x[0], x[1], x[2]
    SIoN = S * I / N
    J[0, 0] = -SIoN
    J[0, 3] = beta * SIoN / N
    J[1, 0] = SIoN
    J[1, 1] = -E
    J[1, 3] = -beta * SIoN / N
    J[2, 1] = E
    J[2, 2] = -I
    J[3, 2] = I
    return J


@njit(nogil=True, cache=True)
def _eaihrd_rhs(t, x, th):
    out = np.empty(6)
    a, s, r1, r2, r3, h, d, c1, c2, N = (th[0], th[1], th[2], th[3], th[4],
                                         th[5], th[6], th[7], th[8], th[9])
    A, I, H, R, D, E = x[0], x[1], x[2], x[3], x[4], x[5]
    susceptible = N - (A + I + H + R + D + E)
    force = c1 * A + c2 * I
    out[0] = a * E - r1 * A
    out[1] = s * E - (h + r2) * I
    out[2] = h * I - (r3 + d) * H
    out[3] = r1 * A + r2 * I + r3 * H
    out[4] = d * H
    out[5] = susceptible * force - (a + s) * E
    return out


@njit(nogil=True, cache=True)
def _eaihrd_jac_state(t, x, th):
    J = np.zeros((6, 6))
    a, s, r1, r2, r3, h, d, c1, c2, N = (th[0], th[1], th[2], th[3], th[4],
                                         th[5], th[6], th[7], th[8], th[9])
    A, I = x[0], x[1]
    susceptible = N - (x[0] + x[1] + x[2] + x[3] + x[4] + x[5])
    force = c1 * A + c2 * I
    J[0, 0] = -r1
    J[0, 5] = a
    J[1, 1] = -(h + r2)
    J[1, 5] = s
    J[2, 1] = h
    J[2, 2] = -(r3 + d)
    J[3, 0] = r1
    J[3, 1] = r2
    J[3, 2] = r3
    J[4, 2] = d
    for m in range(6):
        J[5, m] = -force
    J[5, 0] += susceptible * c1
    J[5, 1] += susceptible * c2
    J[5, 5] += -(a + s)
    return J


@njit(nogil=True, cache=True)
def _eaihrd_jac_params(t, x, th):
    J = np.zeros((6, 10))
    a, s, r1, r2, r3, h, d, c1, c2, N = (th[0], th[1], th[2], th[3], th[4],
                                         th[5], th[6], th[7], th[8], th[9])
    A, I, H, E = x[0], x[1], x[2], x[5]
    susceptible = N - (x[0] + x[1] + x[2] + x[3] + x[4] + x[5])
    force = c1 * A + c2 * I
    J[0, 0] = E
    J[0, 2] = -A
    J[1, 1] = E
    J[1, 3] = -I
    J[1, 5] = -I
    J[2, 4] = -H
    J[2, 5] = I
    J[2, 6] = -H
    J[3, 2] = A
    J[3, 3] = I
    J[3, 4] = H
    J[4, 6] = H
    J[5, 0] = -E
    J[5, 1] = -E
    J[5, 7] = susceptible * A
    J[5, 8] = susceptible * I
    J[5, 9] = force
    return J


@njit(nogil=True, cache=True)
def _fourtha_rhs(t, x, th):
    out = np.empty(5)
    F, R2, R3, C1, C2, r1, alpha = th[0], th[1], th[2], th[3], th[4], th[5], th[6]
    D, D1, D2, D3, At = x[0], x[1], x[2], x[3], x[4]
    k1 = F * R2 * R3
    k2 = F * R2 + F * R3 + R2 * R3
    k3 = F + R2 + R3
    Q = D3 + k3 * D2 + k2 * D1 + k1 * D - alpha
    B = C1 * At + C2 * (D2 + R3 * D1)
    out[0] = D1
    out[1] = D2
    out[2] = D3
    out[3] = -(k3 * D3 + k2 * D2 + k1 * D1) - Q * B
    out[4] = (D3 + D2 * (R2 + R3) + D1 * R2 * R3) - r1 * At
    return out


@njit(nogil=True, cache=True)
def _fourtha_jac_state(t, x, th):
    J = np.zeros((5, 5))
    F, R2, R3, C1, C2, r1, alpha = th[0], th[1], th[2], th[3], th[4], th[5], th[6]
    D, D1, D2, D3, At = x[0], x[1], x[2], x[3], x[4]
    k1 = F * R2 * R3
    k2 = F * R2 + F * R3 + R2 * R3
    k3 = F + R2 + R3
    Q = D3 + k3 * D2 + k2 * D1 + k1 * D - alpha
    B = C1 * At + C2 * (D2 + R3 * D1)
    J[0, 1] = 1.0
    J[1, 2] = 1.0
    J[2, 3] = 1.0
    J[3, 0] = -k1 * B
    J[3, 1] = -k1 - k2 * B - Q * C2 * R3
    J[3, 2] = -k2 - k3 * B - Q * C2
    J[3, 3] = -k3 - B
    J[3, 4] = -Q * C1
    J[4, 1] = R2 * R3
    J[4, 2] = R2 + R3
    J[4, 3] = 1.0
    J[4, 4] = -r1
    return J


@njit(nogil=True, cache=True)
def _fourtha_jac_params(t, x, th):
    J = np.zeros((5, 7))
    F, R2, R3, C1, C2, r1, alpha = th[0], th[1], th[2], th[3], th[4], th[5], th[6]
    D, D1, D2, D3, At = x[0], x[1], x[2], x[3], x[4]
    k1 = F * R2 * R3
    k2 = F * R2 + F * R3 + R2 * R3
    k3 = F + R2 + R3
    Q = D3 + k3 * D2 + k2 * D1 + k1 * D - alpha
    B = C1 * At + C2 * (D2 + R3 * D1)
    # dQ/d{F,R2,R3} via the elementary-symmetric derivatives of k1,k2,k3.
    dQ_dF = D2 + D1 * (R2 + R3) + D * R2 * R3
    dQ_dR2 = D2 + D1 * (F + R3) + D * F * R3
    dQ_dR3 = D2 + D1 * (F + R2) + D * F * R2
    dL_dF = D3 + D2 * (R2 + R3) + D1 * R2 * R3
    dL_dR2 = D3 + D2 * (F + R3) + D1 * F * R3
    dL_dR3 = D3 + D2 * (F + R2) + D1 * F * R2
    J[3, 0] = -dL_dF - dQ_dF * B
    J[3, 1] = -dL_dR2 - dQ_dR2 * B
    J[3, 2] = -dL_dR3 - dQ_dR3 * B - Q * C2 * D1
    J[3, 3] = -Q * At
    J[3, 4] = -Q * (D2 + R3 * D1)
    J[3, 6] = B
    J[4, 1] = D2 + D1 * R3
    J[4, 2] = D2 + D1 * R2
    J[4, 5] = -At
    return J


def seir_system() -> OdeSystem:
    """SEIR system; theta = (beta, sigma, gamma, N), state (S, E, I, R)."""
    return OdeSystem(dim=4, rhs=_seir_rhs, jacobian_state=_seir_jac_state,
                     jacobian_params=_seir_jac_params, n_params=4)


def eaihrd_system() -> OdeSystem:
    """EAIHRD system; theta = (a, s, r1, r2, r3, h, d, c1, c2, N),
    state (A, I, H, R, D, E)."""
    return OdeSystem(dim=6, rhs=_eaihrd_rhs, jacobian_state=_eaihrd_jac_state,
                     jacobian_params=_eaihrd_jac_params, n_params=10)


def fourtha_system() -> OdeSystem:
    """Reduced model; theta = (F, R2, R3, C1, C2, r1, alpha),
    state (D, D', D'', D''', Atilde)."""
    return OdeSystem(dim=5, rhs=_fourtha_rhs, jacobian_state=_fourtha_jac_state,
                     jacobian_params=_fourtha_jac_params, n_params=7)


SEIR_OBSERVABLE = 2        # I
SEIR_NONOBSERVABLE = 1     # E
EAIHRD_OBSERVABLE = 4      # D
FOURTHA_OBSERVABLE = 0     # D
FOURTHA_NONOBSERVABLE = 4  # Atilde


# ---------------------------------------------------------------------------
# Symmetry maps
# ---------------------------------------------------------------------------


def seir_symmetry_partner(p: SeirParams) -> SeirParams:
    """Swap sigma and gamma and transport the initial conditions so that the
    observable I(t) is unchanged.  Undefined when sigma == gamma."""
    if abs(p.sigma - p.gamma) <= 1e-12 * max(abs(p.sigma), abs(p.gamma)):
        raise DegenerateSymmetryError(
            f"sigma == gamma == {p.sigma:g}: the swap map is the identity")
    sigma2 = p.gamma
    gamma2 = p.sigma
    ratio = p.sigma / sigma2
    S02 = p.S0 * ratio
    E02 = ratio * p.E0 + ((gamma2 - p.gamma) / sigma2) * p.I0
    return SeirParams(beta=p.beta, sigma=sigma2, gamma=gamma2,
                      S0=S02, E0=E02, I0=p.I0, N=p.N)


def eaihrd_symmetry_partner(p: FourthAParams) -> FourthAParams:
    """Swap F and R2 and adjust C1, C2, Atilde(0); R3, r1, alpha and the D
    initial derivatives are globally identifiable and unchanged."""
    den_F = p.F - p.r1
    den_R2 = p.R2 - p.r1
    scale = max(1.0, abs(p.F), abs(p.R2), abs(p.r1))
    if abs(den_F) <= 1e-14 * scale or abs(den_R2) <= 1e-14 * scale:
        raise DegenerateSymmetryError(
            f"F={p.F:g}, R2={p.R2:g} collide with r1={p.r1:g}")
    C1p = p.C1 * den_R2 / den_F
    C2p = p.C2 + p.C1 * (p.F - p.R2) / den_F
    At0p = (den_F / den_R2) * p.Atilde0 \
        + ((p.F - p.R2) / (p.r1 - p.R2)) * (p.D2_0 + p.R3 * p.D1_0)
    return replace(p, F=p.R2, R2=p.F, C1=C1p, C2=C2p, Atilde0=At0p)


# ---------------------------------------------------------------------------
# EAIHRD -> 4thA reduction
# ---------------------------------------------------------------------------


def eaihrd_to_4tha(p: EaihrdParams) -> FourthAParams:
    """Lump the nine EAIHRD rates into the seven reduced parameters and convert
    the compartment initial values into D-derivative initial conditions."""
    if min(p.h, p.s, p.d, p.a) <= 0:
        raise ReductionUndefinedError(
            f"reduction needs a, s, h, d > 0 (got a={p.a:g}, s={p.s:g}, "
            f"h={p.h:g}, d={p.d:g})")
    F = p.a + p.s
    R2 = p.r2 + p.h
    R3 = p.r3 + p.d
    hsd = p.h * p.s * p.d
    C1 = p.a * p.c1 / hsd
    C2 = p.s * p.c2 / hsd
    D1_0 = p.d * p.H0
    D2_0 = p.h * p.d * p.I0 - R3 * p.d * p.H0
    D3_0 = hsd * p.E0 - p.h * p.d * (R2 + R3) * p.I0 + R3 ** 2 * p.d * p.H0
    At0 = hsd / p.a * p.A0
    alpha = hsd * (p.N - (p.A0 + p.I0 + p.H0 + p.R0 + p.D0)) \
        + F * (D2_0 + D1_0 * (R2 + R3) + p.D0 * R2 * R3)
    return FourthAParams(F=F, R2=R2, R3=R3, C1=C1, C2=C2, r1=p.r1, alpha=alpha,
                         D0=p.D0, D1_0=D1_0, D2_0=D2_0, D3_0=D3_0, Atilde0=At0)


# ---------------------------------------------------------------------------
# Numerical symmetry verification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SymmetryPair:
    """Two parameter sets expected to produce the same observable."""

    map_name: str
    primary: ModelParams
    partner: ModelParams


@dataclass(frozen=True)
class SymmetryReport:
    ok: bool
    max_rel_deviation: float
    time_of_max: float
    tol: float


def seir_symmetry_pair(p: SeirParams) -> SymmetryPair:
    return SymmetryPair("seir_sigma_gamma_swap", p, seir_symmetry_partner(p))


def eaihrd_symmetry_pair(p: FourthAParams) -> SymmetryPair:
    return SymmetryPair("eaihrd_F_R2_swap", p, eaihrd_symmetry_partner(p))


def _observable_series(params: ModelParams, grid: np.ndarray) -> np.ndarray:
    if isinstance(params, SeirParams):
        system, idx = seir_system(), SEIR_OBSERVABLE
        rel, ab = 1e-10, 1e-10
    elif isinstance(params, EaihrdParams):
        system, idx = eaihrd_system(), EAIHRD_OBSERVABLE
        rel, ab = 1e-10, 1e-18
    elif isinstance(params, FourthAParams):
        system, idx = fourtha_system(), FOURTHA_OBSERVABLE
        rel, ab = 1e-10, 1e-18
    else:
        raise TypeError(f"unsupported parameter type {type(params).__name__}")
    cfg = SolverConfig(output_grid=grid, rel_tol=rel, abs_tol=ab)
    return integrate(system, params.theta(), params.x0(), cfg).column(idx)


def verify_symmetry(pair: SymmetryPair, horizon_days: float,
                    tol: float = 1e-4) -> SymmetryReport:
    """Integrate both sets on a daily grid and compare observables pointwise.

    The deviation at each time is |y1 - y2| / max(|y1|, |y2|), 0 where both
    vanish; the report carries the maximum and where it occurred.
    """
    grid = daily_grid(horizon_days)
    y1 = _observable_series(pair.primary, grid)
    y2 = _observable_series(pair.partner, grid)
    scale = np.maximum(np.abs(y1), np.abs(y2))
    dev = np.zeros_like(y1)
    nz = scale > 0
    dev[nz] = np.abs(y1[nz] - y2[nz]) / scale[nz]
    worst = int(np.argmax(dev))
    return SymmetryReport(ok=bool(dev[worst] < tol),
                          max_rel_deviation=float(dev[worst]),
                          time_of_max=float(grid[worst]), tol=tol)


# ---------------------------------------------------------------------------
# Estimation bindings: affine map from named quantities to (theta, x0)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelBinding:
    """Affine bridge between named estimation quantities and solver inputs.

    theta = theta_const + theta_mat @ q and x0 = x0_const + x0_mat @ q, with q
    the quantity vector in ``quantity_names`` order.  The constant matrices are
    also the exact input Jacobians used by the Hessian chain rule.
    """

    name: str
    system: OdeSystem
    quantity_names: tuple
    theta_const: np.ndarray
    theta_mat: np.ndarray
    x0_const: np.ndarray
    x0_mat: np.ndarray
    observable_index: int
    observable_name: str
    nonobservable_index: int
    nonobservable_name: str
    default_noise_structure: str
    default_horizon: float
    rel_tol: float
    abs_tol: float

    @property
    def n_quantities(self) -> int:
        return len(self.quantity_names)

    def quantity_vector(self, mapping: dict) -> np.ndarray:
        missing = [n for n in self.quantity_names if n not in mapping]
        if missing:
            raise KeyError(f"missing quantities for model {self.name}: {missing}")
        return np.array([float(mapping[n]) for n in self.quantity_names])

    def build_inputs(self, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        q = np.asarray(q, dtype=float)
        return self.theta_const + self.theta_mat @ q, self.x0_const + self.x0_mat @ q

    def solver_config(self, grid: np.ndarray) -> SolverConfig:
        return SolverConfig(output_grid=grid, rel_tol=self.rel_tol,
                            abs_tol=self.abs_tol)

    def trajectory(self, q: np.ndarray, grid: np.ndarray) -> TimeSeries:
        theta, x0 = self.build_inputs(q)
        return integrate(self.system, theta, x0, self.solver_config(grid))

    def observable(self, q: np.ndarray, grid: np.ndarray) -> TimeSeries:
        return self.trajectory(q, grid).select(self.observable_index)


def seir_binding(I0: float = 50.0, N: float = 9039.0) -> ModelBinding:
    """Estimation quantities (beta, sigma, gamma, S0, E0) with I0 a datum and
    N the known total; R(0) = N - S0 - E0 - I0 absorbs initial-count changes."""
    names = ("beta", "sigma", "gamma", "S0", "E0")
    theta_const = np.array([0.0, 0.0, 0.0, N])
    theta_mat = np.zeros((4, 5))
    theta_mat[0, 0] = 1.0
    theta_mat[1, 1] = 1.0
    theta_mat[2, 2] = 1.0
    x0_const = np.array([0.0, 0.0, I0, N - I0])
    x0_mat = np.zeros((4, 5))
    x0_mat[0, 3] = 1.0
    x0_mat[1, 4] = 1.0
    x0_mat[3, 3] = -1.0
    x0_mat[3, 4] = -1.0
    return ModelBinding(
        name="seir", system=seir_system(), quantity_names=names,
        theta_const=theta_const, theta_mat=theta_mat,
        x0_const=x0_const, x0_mat=x0_mat,
        observable_index=SEIR_OBSERVABLE, observable_name="I",
        nonobservable_index=SEIR_NONOBSERVABLE, nonobservable_name="E",
        default_noise_structure="level", default_horizon=60.0,
        rel_tol=1e-8, abs_tol=1e-10)


def fourtha_binding() -> ModelBinding:
    """All seven reduced parameters plus the five initial values as quantities."""
    names = ("F", "R2", "R3", "C1", "C2", "r1", "alpha",
             "D0", "D1_0", "D2_0", "D3_0", "Atilde0")
    theta_mat = np.zeros((7, 12))
    for i in range(7):
        theta_mat[i, i] = 1.0
    x0_mat = np.zeros((5, 12))
    for i in range(5):
        x0_mat[i, 7 + i] = 1.0
    return ModelBinding(
        name="fourtha", system=fourtha_system(), quantity_names=names,
        theta_const=np.zeros(7), theta_mat=theta_mat,
        x0_const=np.zeros(5), x0_mat=x0_mat,
        observable_index=FOURTHA_OBSERVABLE, observable_name="D",
        nonobservable_index=FOURTHA_NONOBSERVABLE, nonobservable_name="Atilde",
        default_noise_structure="increment", default_horizon=180.0,
        rel_tol=1e-8, abs_tol=1e-16)
