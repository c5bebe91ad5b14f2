"""Gaussian-process regression over the tuning box.

A `GpModel` is a Matérn-5/2 ARD GP with a constant mean, defined on inputs
normalized to the unit cube; `fit` standardizes the outputs per call and
maximizes the log marginal likelihood over (log lengthscales, log signal
variance, log noise variance, mean) by multi-start projected gradient
ascent with analytic gradients through the Cholesky factorization.

`posterior` and `sample_joint` report means/variances back on the raw
output scale.  A fitted model is immutable, so both are safe to call
concurrently; only `fit` builds new state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular

#: Lengthscale bounds in normalized (unit-cube) input units.
LENGTHSCALE_BOUNDS = (0.005, 2.0)
#: Noise-variance bounds on the standardized output scale.
NOISE_VAR_BOUNDS = (1e-6, 1.0)
#: Signal-variance box; wide enough that the projection is inactive for
#: standardized outputs, present so every coordinate has finite bounds.
SIGNAL_VAR_BOUNDS = (1e-4, 1e4)
#: Constant-mean box on the standardized scale.
MEAN_BOUNDS = (-1e6, 1e6)

#: Starting diagonal jitter (relative to mean diagonal) and escalation cap.
_JITTER_START = 1e-10
_JITTER_MAX = 1e-2

N_RESTARTS = 5
N_ASCENT_STEPS = 200


class CholeskyFailure(RuntimeError):
    """Gram matrix stayed indefinite after maximum jitter escalation."""


def _scaled_sq_dists(x1: np.ndarray, x2: np.ndarray,
                     lengthscales: np.ndarray) -> np.ndarray:
    """Per-dimension squared distances (n1, n2, d) scaled by lengthscales."""
    diff = x1[:, None, :] - x2[None, :, :]
    return (diff / lengthscales) ** 2


def matern52(x1: np.ndarray, x2: np.ndarray, lengthscales: np.ndarray,
             signal_var: float) -> np.ndarray:
    """Matérn-5/2 kernel with per-dimension (ARD) lengthscales."""
    x1 = np.atleast_2d(np.asarray(x1, dtype=float))
    x2 = np.atleast_2d(np.asarray(x2, dtype=float))
    lengthscales = np.asarray(lengthscales, dtype=float)
    s = np.sqrt(5.0 * _scaled_sq_dists(x1, x2, lengthscales).sum(axis=2))
    return signal_var * (1.0 + s + s * s / 3.0) * np.exp(-s)


def _chol_with_jitter(k: np.ndarray) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor, escalating diagonal jitter on failure."""
    if not np.all(np.isfinite(k)):  # jitter cannot repair non-finite entries
        raise CholeskyFailure("Gram matrix contains non-finite entries")
    diag_mean = float(np.mean(np.diag(k)))
    scale = diag_mean if diag_mean > 0 else 1.0
    jitter = 0.0
    while True:
        try:
            return cholesky(k + jitter * np.eye(len(k)), lower=True), jitter
        except np.linalg.LinAlgError:
            pass
        except ValueError:
            pass
        jitter = _JITTER_START * scale if jitter == 0.0 else jitter * 10.0
        if jitter > _JITTER_MAX * scale:
            raise CholeskyFailure(
                f"Gram matrix not positive definite after jitter {jitter:g}")


@dataclass(frozen=True)
class GpModel:
    """Immutable fitted GP on normalized inputs / standardized outputs.

    `y_shift`/`y_scale` undo the per-fit output standardization; models
    built directly (both set to 0/1) work on the stored scale as-is.
    """

    lengthscales: np.ndarray  # (d,)
    signal_var: float
    noise_var: float
    mean: float
    x: np.ndarray  # (n, d) in the unit cube
    y: np.ndarray  # (n,) standardized
    y_shift: float = 0.0
    y_scale: float = 1.0
    fit_history: dict | None = field(default=None, compare=False)
    _chol: np.ndarray | None = field(default=None, compare=False, repr=False)
    _alpha: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        ls = np.asarray(self.lengthscales, dtype=float)
        x = np.atleast_2d(np.asarray(self.x, dtype=float))
        y = np.asarray(self.y, dtype=float).ravel()
        object.__setattr__(self, "lengthscales", ls)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        if ls.ndim != 1 or np.any(ls <= 0) or not np.all(np.isfinite(ls)):
            raise ValueError("lengthscales must be positive and finite")
        if self.signal_var <= 0 or self.noise_var < 0:
            raise ValueError("variances must be positive")
        if x.shape[1] != ls.shape[0]:
            raise ValueError("input dimension does not match lengthscales")
        if x.shape[0] != y.shape[0]:
            raise ValueError("x and y row counts differ")
        if x.shape[0] > 0:
            k = matern52(x, x, ls, self.signal_var)
            k[np.diag_indices_from(k)] += self.noise_var
            chol, _ = _chol_with_jitter(k)
            alpha = cho_solve((chol, True), y - self.mean)
            object.__setattr__(self, "_chol", chol)
            object.__setattr__(self, "_alpha", alpha)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]


def posterior(model: GpModel, xstar: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and variance at query points, on the raw output scale.

    Accepts one point (d,) or a batch (m, d); returns matching scalars or
    length-m vectors.  Variances are clamped at zero against roundoff.
    """
    xstar = np.asarray(xstar, dtype=float)
    squeeze = xstar.ndim == 1
    xq = np.atleast_2d(xstar)
    if xq.shape[1] != model.d:
        raise ValueError(f"query dimension {xq.shape[1]} != model dimension {model.d}")
    if model.n == 0:
        mu = np.full(xq.shape[0], model.mean)
        var = np.full(xq.shape[0], model.signal_var)
    else:
        kstar = matern52(xq, model.x, model.lengthscales, model.signal_var)
        mu = model.mean + kstar @ model._alpha
        v = solve_triangular(model._chol, kstar.T, lower=True)
        var = np.maximum(model.signal_var - np.sum(v * v, axis=0), 0.0)
    mu = mu * model.y_scale + model.y_shift
    var = var * model.y_scale**2
    return (float(mu[0]), float(var[0])) if squeeze else (mu, var)


def sample_joint(model: GpModel, candidates: np.ndarray, seed: int) -> np.ndarray:
    """One draw from the joint posterior at the candidate set (raw scale)."""
    xq = np.atleast_2d(np.asarray(candidates, dtype=float))
    if xq.shape[0] < 1:
        raise ValueError("need at least one candidate")
    if xq.shape[1] != model.d:
        raise ValueError(f"candidate dimension {xq.shape[1]} != model dimension {model.d}")
    kqq = matern52(xq, xq, model.lengthscales, model.signal_var)
    if model.n == 0:
        mu = np.full(xq.shape[0], model.mean)
        cov = kqq
    else:
        kstar = matern52(xq, model.x, model.lengthscales, model.signal_var)
        mu = model.mean + kstar @ model._alpha
        v = solve_triangular(model._chol, kstar.T, lower=True)
        cov = kqq - v.T @ v
    cov = cov + 1e-8 * np.eye(len(cov))
    chol, _ = _chol_with_jitter(cov)
    z = np.random.default_rng(seed).standard_normal(len(cov))
    draw = mu + chol @ z
    return draw * model.y_scale + model.y_shift


def log_marginal_likelihood(psi: np.ndarray, x: np.ndarray, y: np.ndarray,
                            with_grad: bool = False):
    """Log marginal likelihood (and gradient) at packed hyperparameters.

    psi = [log lengthscales (d), log signal_var, log noise_var, mean] on the
    standardized output scale.
    """
    n, d = x.shape
    ls = np.exp(psi[:d])
    sv = float(np.exp(psi[d]))
    nv = float(np.exp(psi[d + 1]))
    m = float(psi[d + 2])

    u = _scaled_sq_dists(x, x, ls)  # (n, n, d)
    s = np.sqrt(5.0 * u.sum(axis=2))
    expo = np.exp(-s)
    ksig = sv * (1.0 + s + s * s / 3.0) * expo
    k = ksig + nv * np.eye(n)
    chol, _ = _chol_with_jitter(k)
    resid = y - m
    alpha = cho_solve((chol, True), resid)
    lml = (-0.5 * float(resid @ alpha)
           - float(np.sum(np.log(np.diag(chol))))
           - 0.5 * n * np.log(2.0 * np.pi))
    if not with_grad:
        return lml

    kinv = cho_solve((chol, True), np.eye(n))
    a_mat = np.outer(alpha, alpha) - kinv
    grad = np.empty(d + 3)
    # d k / d log lengthscale_j = sv * (5/3) * u_j * (1 + s) * exp(-s)
    common = sv * (5.0 / 3.0) * (1.0 + s) * expo
    for j in range(d):
        grad[j] = 0.5 * float(np.sum(a_mat * (common * u[:, :, j])))
    grad[d] = 0.5 * float(np.sum(a_mat * ksig))
    grad[d + 1] = 0.5 * nv * float(np.trace(a_mat))
    grad[d + 2] = float(np.sum(alpha))
    return lml, grad


def _psi_bounds(d: int) -> tuple[np.ndarray, np.ndarray]:
    lo = np.concatenate([np.full(d, np.log(LENGTHSCALE_BOUNDS[0])),
                         [np.log(SIGNAL_VAR_BOUNDS[0])],
                         [np.log(NOISE_VAR_BOUNDS[0])],
                         [MEAN_BOUNDS[0]]])
    hi = np.concatenate([np.full(d, np.log(LENGTHSCALE_BOUNDS[1])),
                         [np.log(SIGNAL_VAR_BOUNDS[1])],
                         [np.log(NOISE_VAR_BOUNDS[1])],
                         [MEAN_BOUNDS[1]]])
    return lo, hi


def fit(x: np.ndarray, y: np.ndarray, *, n_restarts: int = N_RESTARTS,
        n_steps: int = N_ASCENT_STEPS, seed: int = 0) -> GpModel:
    """Maximum-likelihood GP fit on unit-cube inputs.

    Outputs are standardized internally; the returned model undoes the
    standardization in `posterior`/`sample_joint`.  Raises ValueError for
    fewer than 2 distinct inputs and CholeskyFailure for degenerate data.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y_raw = np.asarray(y, dtype=float).ravel()
    n, d = x.shape
    if y_raw.shape[0] != n:
        raise ValueError("x and y row counts differ")
    if len(np.unique(x, axis=0)) < 2:
        raise ValueError("need at least 2 distinct input points")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y_raw))):
        raise ValueError("inputs and outputs must be finite")

    y_shift = float(np.mean(y_raw))
    std = float(np.std(y_raw))
    y_scale = std if std > 1e-12 else 1.0
    yn = (y_raw - y_shift) / y_scale

    lo, hi = _psi_bounds(d)
    rng = np.random.default_rng(seed)
    starts = [np.concatenate([np.full(d, np.log(0.3)),
                              [0.0], [np.log(1e-2)], [0.0]])]
    for _ in range(n_restarts - 1):
        starts.append(np.concatenate([
            rng.uniform(np.log(0.05), np.log(1.0), size=d),
            [rng.uniform(np.log(0.3), np.log(3.0))],
            [rng.uniform(np.log(1e-5), np.log(1e-1))],
            [rng.normal(scale=0.3)],
        ]))

    best_psi = None
    best_lml = -np.inf
    best_trace: list[float] = []
    for psi0 in starts:
        psi = np.clip(psi0, lo, hi)
        lml, grad = log_marginal_likelihood(psi, x, yn, with_grad=True)
        trace = [lml]
        eta = 0.1
        for _ in range(n_steps):
            cand = np.clip(psi + eta * grad, lo, hi)
            cand_lml = log_marginal_likelihood(cand, x, yn)
            if cand_lml > lml:
                psi = cand
                lml, grad = log_marginal_likelihood(psi, x, yn, with_grad=True)
                trace.append(lml)
                eta *= 1.2
            else:
                eta *= 0.5
                if eta < 1e-14:
                    break
        if lml > best_lml:
            best_lml, best_psi, best_trace = lml, psi, trace

    ls = np.exp(best_psi[:d])
    return GpModel(
        lengthscales=ls,
        signal_var=float(np.exp(best_psi[d])),
        noise_var=float(np.exp(best_psi[d + 1])),
        mean=float(best_psi[d + 2]),
        x=x, y=yn, y_shift=y_shift, y_scale=y_scale,
        fit_history={"best_lml": best_lml,
                     "accepted_lml": [float(v) for v in best_trace],
                     "n_restarts": n_restarts},
    )
