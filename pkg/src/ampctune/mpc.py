"""Finite-horizon optimal control for the cartpole via box-constrained iLQR.

The solver minimizes, over action sequences u(0..N-1) with |u| <= u_max,

    sum_k [ w_cos*(1-cos phi) + w_p*p^2 + w_pdot*pdot^2 + w_phidot*phidot^2
            + w_u*u^2 + rho*max(0, |p| - s_pos_max)^2 ]
    + terminal_scale * [state terms at x(N)] + rho*max(0, |p(N)| - s_pos_max)^2

subject to the RK4-discretized plant dynamics.  Its first optimal action is
the implicit state-feedback policy that the networks later imitate.

Algorithm: iterated LQR with Gauss-Newton value expansion, a clamped Newton
step on the scalar control (exact box QP in 1-D: the feedback row is zeroed
whenever the clamp is active), backtracking line search on a strict cost
decrease, and a Levenberg-Marquardt shift (x10 on rejected steps, /2 on
accepted, floor 1e-9).  Convergence is measured by the projected gradient
max_k |u_k - clamp(u_k - dJ/du_k)| with the exact gradient from an adjoint
sweep.  For tolerances below the cost-rounding floor (~1e-7) a short polish
phase switches the acceptance test from cost decrease (no longer representable
in double precision) to projected-gradient decrease, taking damped Newton
steps around the best iterate with the damping adapted Levenberg-Marquardt
style.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .plant import (
    CartpoleConstants,
    CartpoleParams,
    N_PARAM,
    _rk4_step,
    _rk4_step_jac,
    pack_physics,
    wrap_angle,
)


class NonFiniteCost(RuntimeError):
    """Rollout under the MPC model diverged; the caller must treat as failure."""


@dataclass(frozen=True)
class MpcConfig:
    """Horizon, discretization, cost weights and solver controls."""

    n_horizon: int = 50
    dt: float = 0.02           # [s]
    w_cos: float = 10.0        # weight on 1 - cos(phi)
    w_p: float = 1.0           # weight on p^2
    w_pdot: float = 0.1        # weight on pdot^2
    w_phidot: float = 0.1      # weight on phidot^2
    w_u: float = 0.01          # weight on u^2
    rho: float = 1e4           # rail-penalty weight on max(0, |p| - rail)^2
    rail_margin: float = 0.03  # internal rail tightening [m]; see rail_limit()
    terminal_scale: float = 10.0
    eps_conv: float = 1e-6     # projected-gradient tolerance
    max_iter: int = 600
    constants: CartpoleConstants = field(default_factory=CartpoleConstants)

    def rail_limit(self) -> float:
        """Rail bound the planner penalizes against: s_pos_max - rail_margin.

        The penalty is soft, so optimal plans buy a small violation whenever
        the upright payoff exceeds it; tightening the planner's bound keeps the
        executed trajectory inside the true rail.
        """
        return self.constants.s_pos_max - self.rail_margin

    def validate(self) -> None:
        if self.n_horizon < 1:
            raise ValueError(f"n_horizon must be >= 1, got {self.n_horizon}")
        if self.dt <= 0.0:
            raise ValueError(f"dt must be > 0, got {self.dt}")
        if self.rho <= 0.0:
            raise ValueError(f"rho must be > 0, got {self.rho}")
        if self.eps_conv <= 0.0:
            raise ValueError(f"eps_conv must be > 0, got {self.eps_conv}")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter}")
        for name in ("w_cos", "w_p", "w_pdot", "w_phidot", "w_u"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"cost weight {name} must be >= 0")
        self.constants.validate()
        if not 0.0 <= self.rail_margin < self.constants.s_pos_max:
            raise ValueError(
                f"rail_margin must lie in [0, s_pos_max), got {self.rail_margin}")


@dataclass
class MpcSolution:
    """Optimal action sequence with its predicted trajectory and diagnostics."""

    actions: np.ndarray        # (N,)
    states: np.ndarray         # (N+1, 4)
    cost: float
    grad_norm: float
    converged: bool
    iterations: int
    cost_trace: np.ndarray     # cost after init and after each accepted line-search step


@njit(cache=True)
def _stage_cost(x, u, w_cos, w_p, w_pd, w_fd, w_u, rho, sbar):
    pen = abs(x[0]) - sbar
    if pen < 0.0:
        pen = 0.0
    return (w_cos * (1.0 - np.cos(x[1])) + w_p * x[0] * x[0]
            + w_pd * x[2] * x[2] + w_fd * x[3] * x[3]
            + w_u * u * u + rho * pen * pen)


@njit(cache=True)
def _terminal_cost(x, w_cos, w_p, w_pd, w_fd, rho, sbar, term_scale):
    pen = abs(x[0]) - sbar
    if pen < 0.0:
        pen = 0.0
    state_terms = (w_cos * (1.0 - np.cos(x[1])) + w_p * x[0] * x[0]
                   + w_pd * x[2] * x[2] + w_fd * x[3] * x[3])
    return term_scale * state_terms + rho * pen * pen


@njit(cache=True)
def _stage_grads(x, u, w_cos, w_p, w_pd, w_fd, w_u, rho, sbar):
    """lx (4,), lxx diag (4,), lu, luu for one stage."""
    lx = np.empty(4)
    lxx = np.empty(4)
    pen = abs(x[0]) - sbar
    active = pen > 0.0
    if not active:
        pen = 0.0
    sgn = 1.0 if x[0] >= 0.0 else -1.0
    lx[0] = 2.0 * w_p * x[0] + 2.0 * rho * pen * sgn
    lx[1] = w_cos * np.sin(x[1])
    lx[2] = 2.0 * w_pd * x[2]
    lx[3] = 2.0 * w_fd * x[3]
    lxx[0] = 2.0 * w_p + (2.0 * rho if active else 0.0)
    lxx[1] = w_cos * np.cos(x[1])
    lxx[2] = 2.0 * w_pd
    lxx[3] = 2.0 * w_fd
    lu = 2.0 * w_u * u
    luu = 2.0 * w_u
    return lx, lxx, lu, luu


@njit(cache=True)
def _terminal_grads(x, w_cos, w_p, w_pd, w_fd, rho, sbar, term_scale):
    lx = np.empty(4)
    lxx = np.empty(4)
    pen = abs(x[0]) - sbar
    active = pen > 0.0
    if not active:
        pen = 0.0
    sgn = 1.0 if x[0] >= 0.0 else -1.0
    lx[0] = term_scale * 2.0 * w_p * x[0] + 2.0 * rho * pen * sgn
    lx[1] = term_scale * w_cos * np.sin(x[1])
    lx[2] = term_scale * 2.0 * w_pd * x[2]
    lx[3] = term_scale * 2.0 * w_fd * x[3]
    lxx[0] = term_scale * 2.0 * w_p + (2.0 * rho if active else 0.0)
    lxx[1] = term_scale * w_cos * np.cos(x[1])
    lxx[2] = term_scale * 2.0 * w_pd
    lxx[3] = term_scale * 2.0 * w_fd
    return lx, lxx


@njit(cache=True)
def _rollout(x0, us, dt, phys):
    """Open-loop rollout; returns (xs, finite_flag)."""
    n = us.shape[0]
    xs = np.empty((n + 1, 4))
    xs[0] = x0
    for k in range(n):
        xs[k + 1] = _rk4_step(xs[k], us[k], dt, phys)
        ok = True
        for i in range(4):
            if not np.isfinite(xs[k + 1, i]):
                ok = False
        if not ok:
            return xs, False
    return xs, True


@njit(cache=True)
def _total_cost(xs, us, w_cos, w_p, w_pd, w_fd, w_u, rho, sbar, term_scale):
    n = us.shape[0]
    J = 0.0
    for k in range(n):
        J += _stage_cost(xs[k], us[k], w_cos, w_p, w_pd, w_fd, w_u, rho, sbar)
    J += _terminal_cost(xs[n], w_cos, w_p, w_pd, w_fd, rho, sbar, term_scale)
    return J


@njit(cache=True)
def _projected_grad_norm(xs, us, Fx_all, Fu_all, u_max,
                         w_cos, w_p, w_pd, w_fd, w_u, rho, sbar, term_scale):
    """Exact projected gradient via an adjoint sweep (no feedback terms)."""
    n = us.shape[0]
    lam, _ = _terminal_grads(xs[n], w_cos, w_p, w_pd, w_fd, rho, sbar, term_scale)
    gmax = 0.0
    for k in range(n - 1, -1, -1):
        lx, _, lu, _ = _stage_grads(xs[k], us[k], w_cos, w_p, w_pd, w_fd, w_u, rho, sbar)
        g = lu + Fu_all[k] @ lam
        proj = us[k] - g
        if proj > u_max:
            proj = u_max
        elif proj < -u_max:
            proj = -u_max
        d = abs(us[k] - proj)
        if d > gmax:
            gmax = d
        lam = lx + Fx_all[k].T @ lam
    return gmax


@njit(cache=True)
def _backward_pass(xs, us, Fx_all, Fu_all, mu, u_max,
                   w_cos, w_p, w_pd, w_fd, w_u, rho, sbar, term_scale,
                   kff, K):
    """Fill kff/K; returns True when all regularized Quu stay positive."""
    n = us.shape[0]
    Vx, Vxx_d = _terminal_grads(xs[n], w_cos, w_p, w_pd, w_fd, rho, sbar, term_scale)
    Vxx = np.zeros((4, 4))
    for i in range(4):
        Vxx[i, i] = Vxx_d[i]
    for k in range(n - 1, -1, -1):
        lx, lxx_d, lu, luu = _stage_grads(xs[k], us[k], w_cos, w_p, w_pd, w_fd, w_u, rho, sbar)
        Fx = Fx_all[k]
        Fu = Fu_all[k]
        VFx = Vxx @ Fx
        Qx = lx + Fx.T @ Vx
        Qu = lu + Fu @ Vx
        Qxx = Fx.T @ VFx
        for i in range(4):
            Qxx[i, i] += lxx_d[i]
        Quu = luu + Fu @ (Vxx @ Fu) + mu
        Qux = Fu @ VFx
        if Quu < 1e-12:
            return False
        target = us[k] - Qu / Quu
        if target > u_max:
            target = u_max
        elif target < -u_max:
            target = -u_max
        kff[k] = target - us[k]
        if -u_max < target < u_max:
            for i in range(4):
                K[k, i] = -Qux[i] / Quu
        else:
            for i in range(4):
                K[k, i] = 0.0
        # value recursion with the clamped feedforward and (possibly zeroed) gains
        Vx = Qx.copy()
        for i in range(4):
            Vx[i] += K[k, i] * (Quu * kff[k] + Qu) + Qux[i] * kff[k]
        Vxx_new = Qxx
        for i in range(4):
            for j in range(4):
                Vxx_new[i, j] += (Quu * K[k, i] * K[k, j]
                                  + K[k, i] * Qux[j] + Qux[i] * K[k, j])
        for i in range(4):
            for j in range(i + 1, 4):
                m = 0.5 * (Vxx_new[i, j] + Vxx_new[j, i])
                Vxx_new[i, j] = m
                Vxx_new[j, i] = m
        Vxx = Vxx_new
    return True


@njit(cache=True)
def _forward_pass(x0, xs, us, kff, K, alpha, dt, u_max, phys):
    """Roll out the closed-loop candidate; returns (xs_new, us_new, finite)."""
    n = us.shape[0]
    xs_new = np.empty((n + 1, 4))
    us_new = np.empty(n)
    xs_new[0] = x0
    for k in range(n):
        dx = xs_new[k] - xs[k]
        dx[1] = wrap_angle(dx[1])  # seam-crossing deviations stay local
        du = alpha * kff[k]
        for i in range(4):
            du += K[k, i] * dx[i]
        un = us[k] + du
        if un > u_max:
            un = u_max
        elif un < -u_max:
            un = -u_max
        us_new[k] = un
        xs_new[k + 1] = _rk4_step(xs_new[k], un, dt, phys)
        for i in range(4):
            if not np.isfinite(xs_new[k + 1, i]):
                return xs_new, us_new, False
    return xs_new, us_new, True


@njit(cache=True)
def _ilqr(x0, us_init, phys, dt, u_max, sbar,
          w_cos, w_p, w_pd, w_fd, w_u, rho, term_scale,
          max_iter, eps, mu_floor):
    """Full solver loop.

    Returns (us, xs, cost, grad_norm, converged, iterations, cost_trace, n_trace,
    status) with status 0 = ok, 1 = non-finite initial rollout.
    """
    n = us_init.shape[0]
    us = np.empty(n)
    for k in range(n):
        u = us_init[k]
        if u > u_max:
            u = u_max
        elif u < -u_max:
            u = -u_max
        us[k] = u

    cost_trace = np.empty(max_iter + 1)
    n_trace = 0

    xs, finite = _rollout(x0, us, dt, phys)
    if not finite:
        return us, xs, np.inf, np.inf, False, 0, cost_trace, n_trace, 1
    J = _total_cost(xs, us, w_cos, w_p, w_pd, w_fd, w_u, rho, sbar, term_scale)
    if not np.isfinite(J):
        return us, xs, J, np.inf, False, 0, cost_trace, n_trace, 1
    cost_trace[n_trace] = J
    n_trace += 1

    Fx_all = np.empty((n, 4, 4))
    Fu_all = np.empty((n, 4))
    kff = np.zeros(n)
    K = np.zeros((n, 4))

    mu = 1e-6
    mu_max = 1e12
    converged = False
    stalled = False
    gmax = np.inf
    iters = 0

    for _ in range(max_iter):
        iters += 1
        for k in range(n):
            _, Fx, Fu = _rk4_step_jac(xs[k], us[k], dt, phys)
            Fx_all[k] = Fx
            Fu_all[k] = Fu
        gmax = _projected_grad_norm(xs, us, Fx_all, Fu_all, u_max,
                                    w_cos, w_p, w_pd, w_fd, w_u, rho, sbar, term_scale)
        if gmax < eps:
            converged = True
            break

        # backward pass, escalating the regularization until Quu stays positive
        while True:
            ok = _backward_pass(xs, us, Fx_all, Fu_all, mu, u_max,
                                w_cos, w_p, w_pd, w_fd, w_u, rho, sbar, term_scale,
                                kff, K)
            if ok:
                break
            mu = 10.0 * mu if mu > 0.0 else 1e-6
            if mu > mu_max:
                stalled = True
                break
        if stalled:
            break

        accepted = False
        alpha = 1.0
        for _ls in range(11):
            xs_new, us_new, finite = _forward_pass(x0, xs, us, kff, K, alpha, dt, u_max, phys)
            if finite:
                Jn = _total_cost(xs_new, us_new, w_cos, w_p, w_pd, w_fd, w_u, rho, sbar, term_scale)
                if np.isfinite(Jn) and Jn < J:
                    xs = xs_new
                    us = us_new
                    J = Jn
                    accepted = True
                    break
            alpha *= 0.5
        if accepted:
            cost_trace[n_trace] = J
            n_trace += 1
            mu = mu * 0.5
            if mu < mu_floor:
                mu = mu_floor
        else:
            mu = mu * 10.0
            if mu > mu_max:
                break

    # Polish phase: only reachable for tolerances below the cost-rounding
    # floor; Levenberg-Marquardt steps accepted on projected-gradient decrease
    # instead of cost decrease.  Undamped Gauss-Newton can locally diverge
    # (the value recursion drops second-order dynamics curvature), so failed
    # steps re-expand around the best iterate with escalated damping.
    if (not converged) and gmax < 1e-4 and iters < max_iter:
        best_us = us.copy()
        best_xs = xs.copy()
        best_g = gmax
        fails = 0
        mu_p = mu_floor
        while iters < max_iter and fails < 12:
            iters += 1
            for k in range(n):
                _, Fx, Fu = _rk4_step_jac(best_xs[k], best_us[k], dt, phys)
                Fx_all[k] = Fx
                Fu_all[k] = Fu
            ok = _backward_pass(best_xs, best_us, Fx_all, Fu_all, mu_p, u_max,
                                w_cos, w_p, w_pd, w_fd, w_u, rho, sbar, term_scale,
                                kff, K)
            if not ok:
                mu_p = 10.0 * mu_p if mu_p > 0.0 else 1e-6
                if mu_p > mu_max:
                    break
                continue
            xs_new, us_new, finite = _forward_pass(x0, best_xs, best_us, kff, K,
                                                   1.0, dt, u_max, phys)
            if not finite:
                break
            for k in range(n):
                _, Fx, Fu = _rk4_step_jac(xs_new[k], us_new[k], dt, phys)
                Fx_all[k] = Fx
                Fu_all[k] = Fu
            g_new = _projected_grad_norm(xs_new, us_new, Fx_all, Fu_all, u_max,
                                         w_cos, w_p, w_pd, w_fd, w_u, rho, sbar, term_scale)
            if g_new < best_g:
                best_g = g_new
                best_us = us_new
                best_xs = xs_new
                fails = 0
                mu_p = mu_p * 0.5
                if mu_p < mu_floor:
                    mu_p = mu_floor
                if best_g < eps:
                    break
            else:
                fails += 1
                mu_p = mu_p * 10.0
                if mu_p > mu_max:
                    break
        us = best_us
        xs = best_xs
        gmax = best_g
        J = _total_cost(xs, us, w_cos, w_p, w_pd, w_fd, w_u, rho, sbar, term_scale)
        if gmax < eps:
            converged = True

    return us, xs, J, gmax, converged, iters, cost_trace, n_trace, 0


def _as_theta_array(theta) -> np.ndarray:
    if isinstance(theta, CartpoleParams):
        arr = theta.as_array()
        theta.validate()
        return arr
    arr = np.asarray(theta, dtype=float)
    CartpoleParams.from_array(arr).validate()
    return arr


def solve(
    s0: np.ndarray,
    theta,
    cfg: MpcConfig,
    warm_start: MpcSolution | None = None,
) -> MpcSolution:
    """Solve the horizon problem from s0; optionally warm-started.

    Raises NonFiniteCost when the initial rollout already diverges.  A solution
    that only fails the tolerance is returned with converged = False.
    """
    cfg.validate()
    theta_arr = _as_theta_array(theta)
    s0 = np.asarray(s0, dtype=float).copy()
    if s0.shape != (4,) or not np.all(np.isfinite(s0)):
        raise ValueError("initial state must be a finite length-4 vector")
    s0[1] = wrap_angle(s0[1])
    phys = pack_physics(theta_arr, cfg.constants)
    c = cfg.constants
    if warm_start is not None:
        us0 = np.asarray(warm_start.actions, dtype=float).copy()
        if us0.shape != (cfg.n_horizon,):
            raise ValueError("warm start horizon does not match the configuration")
    else:
        us0 = np.zeros(cfg.n_horizon)
    us, xs, J, gmax, converged, iters, trace, n_trace, status = _ilqr(
        s0, us0, phys, cfg.dt, c.u_max, cfg.rail_limit(),
        cfg.w_cos, cfg.w_p, cfg.w_pdot, cfg.w_phidot, cfg.w_u,
        cfg.rho, cfg.terminal_scale, cfg.max_iter, cfg.eps_conv, 1e-9,
    )
    if status == 1:
        raise NonFiniteCost("rollout under the MPC model produced non-finite states")
    return MpcSolution(
        actions=us,
        states=xs,
        cost=float(J),
        grad_norm=float(gmax),
        converged=bool(converged),
        iterations=int(iters),
        cost_trace=trace[:n_trace].copy(),
    )


def policy(s: np.ndarray, theta, cfg: MpcConfig, warm_start: MpcSolution | None = None) -> float:
    """First element of the optimal action sequence at state s."""
    return float(solve(s, theta, cfg, warm_start=warm_start).actions[0])


def trajectory_cost(xs: np.ndarray, us: np.ndarray, cfg: MpcConfig) -> float:
    """Cost of an arbitrary (states, actions) pair under the MPC objective.

    Shared by the solver and by enumeration oracles so both routes price
    trajectories identically.
    """
    return float(_total_cost(
        np.asarray(xs, dtype=float), np.asarray(us, dtype=float),
        cfg.w_cos, cfg.w_p, cfg.w_pdot, cfg.w_phidot, cfg.w_u,
        cfg.rho, cfg.rail_limit(), cfg.terminal_scale,
    ))


def shift_warm_start(sol: MpcSolution) -> MpcSolution:
    """Receding-horizon warm start: drop the first action, repeat the last."""
    us = np.empty_like(sol.actions)
    us[:-1] = sol.actions[1:]
    us[-1] = sol.actions[-1]
    return MpcSolution(
        actions=us, states=sol.states, cost=sol.cost, grad_norm=sol.grad_norm,
        converged=sol.converged, iterations=sol.iterations, cost_trace=sol.cost_trace,
    )


def save_solution_csv(sol: MpcSolution, path) -> None:
    """Dump a solution as CSV with header kappa,u,p,phi,pdot,phidot.

    One row per stage pairing u(kappa) with the predicted state it is applied
    from; the terminal state row has an empty action field.
    """
    n = sol.actions.shape[0]
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("kappa,u,p,phi,pdot,phidot\n")
        for k in range(n):
            x = sol.states[k]
            f.write(f"{k},{float(sol.actions[k])!r},{float(x[0])!r},"
                    f"{float(x[1])!r},{float(x[2])!r},{float(x[3])!r}\n")
        x = sol.states[n]
        f.write(f"{n},,{float(x[0])!r},{float(x[1])!r},{float(x[2])!r},{float(x[3])!r}\n")
