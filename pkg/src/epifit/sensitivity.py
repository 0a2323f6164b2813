"""Loss-Hessian spectrum at the exact parameter point and eigengap diagnostics.

The loss here is the plain sum of squared observable errors against the exact
trajectory, so at the exact point the Hessian reduces to the Gram form
H = 2 J^T J with J the observable-sensitivity matrix; it is positive
semidefinite by construction and its eigenvalue spread measures how sloppy the
parameter directions are.  This loss is deliberately not the estimators'
objective.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .models import ModelBinding
from .ode import integrate_with_sensitivities

__all__ = ["EIGENVALUE_FLOOR", "HessianReport", "eigengap", "loss_hessian"]

EIGENVALUE_FLOOR = 1e-300


@dataclass(frozen=True)
class HessianReport:
    matrix: np.ndarray
    eigenvalues: np.ndarray  # sorted descending
    eigengap_log10: float
    eigengap_index: int
    parameter_names: tuple

    @property
    def spectrum_span_log10(self) -> float:
        lam = np.maximum(self.eigenvalues, EIGENVALUE_FLOOR)
        return float(np.log10(lam[0]) - np.log10(lam[-1]))


def eigengap(eigenvalues: Sequence[float]) -> tuple[float, int]:
    """Largest difference of log10 of consecutive eigenvalues (descending).

    Returns (gap, index of the upper eigenvalue of the widest pair).
    Nonpositive eigenvalues are floored at ``EIGENVALUE_FLOOR`` with a warning.
    """
    lam = np.asarray(eigenvalues, dtype=float)
    if lam.shape[0] < 2:
        raise ValueError("eigengap needs at least two eigenvalues")
    if np.any(lam <= 0):
        warnings.warn("nonpositive eigenvalues floored at 1e-300 for the eigengap",
                      RuntimeWarning, stacklevel=2)
        lam = np.maximum(lam, EIGENVALUE_FLOOR)
    logs = np.log10(lam)
    gaps = logs[:-1] - logs[1:]
    idx = int(np.argmax(gaps))
    return float(gaps[idx]), idx


def loss_hessian(binding: ModelBinding, theta_star: Union[dict, np.ndarray],
                 free_names: Sequence[str], t_grid: np.ndarray,
                 rel_tol: float = 1e-10, abs_tol: float = 1e-14) -> HessianReport:
    """Hessian of the squared-error loss of the observable at ``theta_star``.

    ``theta_star`` holds every model quantity (dict by name or vector in
    binding order); ``free_names`` selects the quantities differentiated.
    Sensitivities come from the variational equations, mapped through the
    binding's affine input maps (chain rule for initial conditions that are
    themselves estimation quantities).
    """
    if isinstance(theta_star, dict):
        q_full = binding.quantity_vector(theta_star)
    else:
        q_full = np.asarray(theta_star, dtype=float)
    free_names = tuple(free_names)
    name_pos = {n: i for i, n in enumerate(binding.quantity_names)}
    missing = [n for n in free_names if n not in name_pos]
    if missing:
        raise KeyError(f"unknown quantities {missing} for model {binding.name}")
    free_idx = np.array([name_pos[n] for n in free_names], dtype=int)

    theta, x0 = binding.build_inputs(q_full)
    cfg = binding.solver_config(np.asarray(t_grid, dtype=float))
    cfg = type(cfg)(output_grid=cfg.output_grid, method=cfg.method,
                    rel_tol=rel_tol, abs_tol=abs_tol, max_steps=cfg.max_steps)
    _, sens = integrate_with_sensitivities(binding.system, theta, x0, cfg)

    obs = binding.observable_index
    T_theta = binding.theta_mat[:, free_idx]  # (p_ode, n_free)
    T_x0 = binding.x0_mat[:, free_idx]        # (dim, n_free)
    # d obs / d q_free = d obs/d theta . T_theta + d obs/d x0 . T_x0
    J = sens.d_state_d_params[:, obs, :] @ T_theta \
        + sens.d_state_d_ic[:, obs, :] @ T_x0
    H = 2.0 * (J.T @ J)
    H = 0.5 * (H + H.T)
    lam = np.linalg.eigvalsh(H)[::-1]
    gap, idx = eigengap(np.maximum(lam, EIGENVALUE_FLOOR))
    return HessianReport(matrix=H, eigenvalues=lam, eigengap_log10=gap,
                         eigengap_index=idx, parameter_names=free_names)
