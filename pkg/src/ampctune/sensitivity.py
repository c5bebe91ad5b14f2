"""Parameter sensitivity of the optimal first action, by finite differences.

For a state s and nominal parameters theta, the matrix S = d pi(s, theta) /
d theta (one row per action dimension, one column per plant parameter) is
estimated by central differences: each parameter is displaced by +/- delta_j
around the nominal value and the horizon problem is re-solved, warm-started
from the nominal solution.  The step delta_j is proportional to the
calibration half-width of parameter j, so all columns are differenced at a
comparable relative scale.

A perturbed solve that diverges or stops short of tolerance invalidates the
whole matrix (not just its column): downstream consumers require rows built
from a consistent set of converged solves, so the failure is raised as
PerturbedSolveFailed and the sample is discarded by the caller.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import mpc
from .mpc import MpcConfig, MpcSolution, NonFiniteCost
from .plant import N_ACTION, N_PARAM, PARAM_HALFWIDTHS

#: Multiple of a parameter's half-width used as its central-difference step.
FD_STEP_FRACTION = 1e-4

#: Convergence tolerance for the perturbed solves.  The differenced action
#: changes are of order |S| * delta ~ 1e-3, so solver stopping error must sit
#: far below that for step-size-robust estimates; at 1e-10 the noise
#: contribution is ~1e-9 in action units.  Roughly half of sampled states
#: admit this tolerance (warm-started); the rest stop on small gradient
#: floors, fail loudly, and are resampled upstream -- which filters out
#: exactly the states whose difference quotients would be noise-dominated.
FD_EPS = 1e-10


class PerturbedSolveFailed(RuntimeError):
    """A +/-delta re-solve diverged or missed tolerance; discard the sample."""


@dataclass(frozen=True)
class Sensitivity:
    """Action-parameter sensitivity at one state."""

    matrix: np.ndarray     # (N_ACTION, N_PARAM)
    at_state: np.ndarray   # (4,)
    converged: bool

    def validate(self) -> None:
        if self.matrix.shape != (N_ACTION, N_PARAM):
            raise ValueError(
                f"sensitivity matrix must be {(N_ACTION, N_PARAM)}, got {self.matrix.shape}")
        if not np.all(np.isfinite(self.matrix)):
            raise ValueError("sensitivity matrix has non-finite entries")


def fd_steps(scale_fraction: float = FD_STEP_FRACTION) -> np.ndarray:
    """Per-parameter difference steps: fraction of each calibration half-width."""
    return scale_fraction * PARAM_HALFWIDTHS


def sensitivity_fd(
    s: np.ndarray,
    theta_nom,
    cfg: MpcConfig,
    base: MpcSolution,
    *,
    scale_fraction: float = FD_STEP_FRACTION,
    eps_fd: float = FD_EPS,
) -> Sensitivity:
    """Central-difference sensitivity of the first optimal action at s.

    ``base`` must be a converged solution of the same problem at
    ``theta_nom``; every perturbed solve is warm-started from it.  Raises
    PerturbedSolveFailed when any of the 2 * N_PARAM re-solves diverges or
    fails to reach ``eps_fd``.
    """
    if not base.converged:
        raise ValueError("base solution must be converged at theta_nom")
    theta_arr = mpc._as_theta_array(theta_nom)
    s = np.asarray(s, dtype=float)
    cfg_fd = dataclasses.replace(cfg, eps_conv=eps_fd)
    deltas = fd_steps(scale_fraction)
    matrix = np.empty((N_ACTION, N_PARAM))
    for j in range(N_PARAM):
        delta = deltas[j]
        u_pm = np.empty(2)
        for i, sign in enumerate((1.0, -1.0)):
            theta_j = theta_arr.copy()
            theta_j[j] += sign * delta
            try:
                sol = mpc.solve(s, theta_j, cfg_fd, warm_start=base)
            except NonFiniteCost as exc:
                raise PerturbedSolveFailed(
                    f"perturbed solve diverged for parameter {j}") from exc
            if not sol.converged:
                raise PerturbedSolveFailed(
                    f"perturbed solve missed tolerance {eps_fd:g} for parameter {j}"
                    f" (grad_norm={sol.grad_norm:g})")
            u_pm[i] = sol.actions[0]
        matrix[0, j] = (u_pm[0] - u_pm[1]) / (2.0 * delta)
    sens = Sensitivity(matrix=matrix, at_state=s.copy(), converged=True)
    sens.validate()
    return sens
