"""Parameterized cartpole dynamics integrated with classic 4th-order Runge-Kutta.

State convention: s = [p, phi, pdot, phidot] with p the cart position [m] and
phi the pole angle [rad], phi = 0 upright, wrapped to (-pi, pi] after every
public operation.  The single action is the motor voltage u [V].

The continuous-time model, with m = m_pole + m_add,
l_c = (m_pole*l_pole/2 + m_add*l_pole)/m (center of mass along the rod),
J = m_pole*l_pole^2/3 + m_add*l_pole^2 (pivot inertia) and
F = C2*u - C1*pdot (motor force minus cart friction):

    (M+m)*pddot + m*l_c*(phiddot*cos(phi) - phidot^2*sin(phi)) = F
    J*phiddot + m*l_c*cos(phi)*pddot - m*l_c*g*sin(phi) = -C3*phidot

is solved as a 2x2 linear system in (pddot, phiddot) at every evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

N_STATE = 4
N_ACTION = 1
N_PARAM = 5

PARAM_NAMES = ("m_add", "M", "C1", "C2", "C3")

# Half-widths of the symmetric parameter box around the nominal parameter
# vector.  One canonical array shared by sensitivity step scaling, random
# instance sampling and the tuning bounds.
PARAM_HALFWIDTHS = np.array([0.016, 0.4, 2.0, 0.4, 0.008])

# Number of scalars in the packed physics vector consumed by the jitted
# kernels: [m_add, M, C1, C2, C3, m_pole, l_pole, g].
_N_PHYS = 8


@dataclass(frozen=True)
class CartpoleParams:
    """Adjustable plant parameters theta = [m_add, M, C1, C2, C3]."""

    m_add: float = 0.02  # mass atop the rod [kg]
    M: float = 0.57      # cart mass [kg]
    C1: float = 5.0      # velocity-proportional force coefficient [N s/m]
    C2: float = 1.0      # voltage-to-force gain [N/V]
    C3: float = 0.01     # pivot friction [N m s/rad]

    def validate(self) -> None:
        if not np.all(np.isfinite(self.as_array())):
            raise ValueError("plant parameters must be finite")
        if self.M <= 0.0:
            raise ValueError(f"cart mass M must be > 0, got {self.M}")
        if self.m_add < 0.0:
            raise ValueError(f"added mass m_add must be >= 0, got {self.m_add}")
        if self.C2 <= 0.0:
            raise ValueError(f"voltage gain C2 must be > 0, got {self.C2}")
        if self.C1 < 0.0 or self.C3 < 0.0:
            raise ValueError("friction coefficients C1, C3 must be >= 0")

    def as_array(self) -> np.ndarray:
        return np.array([self.m_add, self.M, self.C1, self.C2, self.C3])

    @staticmethod
    def from_array(theta: np.ndarray) -> "CartpoleParams":
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (N_PARAM,):
            raise ValueError(f"expected {N_PARAM} parameters, got shape {theta.shape}")
        return CartpoleParams(*[float(v) for v in theta])


@dataclass(frozen=True)
class CartpoleConstants:
    """Fixed plant constants (not part of the tuned parameter vector)."""

    m_pole: float = 0.1     # rod mass [kg]
    l_pole: float = 0.3     # rod length [m]
    g: float = 9.81         # gravity [m/s^2]
    u_max: float = 12.0     # voltage bound [V]
    s_pos_max: float = 0.39  # rail half-width [m]

    def validate(self) -> None:
        for name in ("m_pole", "l_pole", "g", "u_max", "s_pos_max"):
            v = getattr(self, name)
            if not np.isfinite(v) or v <= 0.0:
                raise ValueError(f"constant {name} must be positive and finite, got {v}")


def pack_physics(theta: np.ndarray | CartpoleParams, consts: CartpoleConstants) -> np.ndarray:
    """Pack parameters and constants into the flat vector the kernels use."""
    if isinstance(theta, CartpoleParams):
        theta = theta.as_array()
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (N_PARAM,):
        raise ValueError(f"expected {N_PARAM} parameters, got shape {theta.shape}")
    return np.array(
        [theta[0], theta[1], theta[2], theta[3], theta[4],
         consts.m_pole, consts.l_pole, consts.g]
    )


@njit(cache=True)
def wrap_angle(phi: float) -> float:
    """Wrap an angle to the interval (-pi, pi]."""
    w = np.pi - (np.pi - phi) % (2.0 * np.pi)
    if w <= -np.pi:  # guard against roundoff in the modulo for inputs near -pi
        w = np.pi
    return w


@njit(cache=True)
def _deriv_core(phi, pdot, phidot, u, phys):
    """Scalar-argument state derivative; the single shared dynamics kernel.

    Returns (pdot, phidot, pddot, phiddot) with the accelerations from the
    2x2 mass-matrix solve.  Every rollout path (solver, simulator, oracles)
    funnels through these exact expressions.
    """
    m_add = phys[0]
    M = phys[1]
    C1 = phys[2]
    C2 = phys[3]
    C3 = phys[4]
    m_pole = phys[5]
    l_pole = phys[6]
    g = phys[7]

    m = m_pole + m_add
    mlc = m_pole * (0.5 * l_pole) + m_add * l_pole
    J = m_pole * l_pole * l_pole / 3.0 + m_add * l_pole * l_pole

    sphi = np.sin(phi)
    cphi = np.cos(phi)

    a = M + m
    b = mlc * cphi
    d = J
    r1 = C2 * u - C1 * pdot + mlc * phidot * phidot * sphi
    r2 = mlc * g * sphi - C3 * phidot
    det = a * d - b * b
    pddot = (d * r1 - b * r2) / det
    phiddot = (a * r2 - b * r1) / det
    return pdot, phidot, pddot, phiddot


@njit(cache=True)
def _deriv(s, u, phys):
    """Continuous-time state derivative [pdot, phidot, pddot, phiddot]."""
    dp, dphi, pddot, phiddot = _deriv_core(s[1], s[2], s[3], u, phys)
    out = np.empty(4)
    out[0] = dp
    out[1] = dphi
    out[2] = pddot
    out[3] = phiddot
    return out


@njit(cache=True)
def _deriv_jac(s, u, phys):
    """Jacobians of the continuous dynamics: A = df/ds (4x4), B = df/du (4,)."""
    m_add = phys[0]
    M = phys[1]
    C1 = phys[2]
    C2 = phys[3]
    C3 = phys[4]
    m_pole = phys[5]
    l_pole = phys[6]
    g = phys[7]

    m = m_pole + m_add
    mlc = m_pole * (0.5 * l_pole) + m_add * l_pole
    J = m_pole * l_pole * l_pole / 3.0 + m_add * l_pole * l_pole

    phi = s[1]
    pdot = s[2]
    phidot = s[3]
    sphi = np.sin(phi)
    cphi = np.cos(phi)

    a = M + m
    b = mlc * cphi
    d = J
    det = a * d - b * b

    r1 = C2 * u - C1 * pdot + mlc * phidot * phidot * sphi
    r2 = mlc * g * sphi - C3 * phidot
    pddot = (d * r1 - b * r2) / det
    phiddot = (a * r2 - b * r1) / det

    # d(accel)/dphi: both the right-hand side and the mass matrix vary with
    # phi.  With A(phi)*acc = r(phi):  dacc/dphi = A^{-1} (dr/dphi - dA/dphi*acc).
    v1 = mlc * phidot * phidot * cphi + mlc * sphi * phiddot
    v2 = mlc * g * cphi + mlc * sphi * pddot
    dpddot_dphi = (d * v1 - b * v2) / det
    dphiddot_dphi = (a * v2 - b * v1) / det

    # d(accel)/dpdot: dr/dpdot = [-C1, 0]
    dpddot_dpdot = (d * -C1) / det
    dphiddot_dpdot = (-b * -C1) / det

    # d(accel)/dphidot: dr/dphidot = [2*mlc*phidot*sphi, -C3]
    w1 = 2.0 * mlc * phidot * sphi
    w2 = -C3
    dpddot_dphidot = (d * w1 - b * w2) / det
    dphiddot_dphidot = (a * w2 - b * w1) / det

    # d(accel)/du: dr/du = [C2, 0]
    dpddot_du = (d * C2) / det
    dphiddot_du = (-b * C2) / det

    A = np.zeros((4, 4))
    A[0, 2] = 1.0
    A[1, 3] = 1.0
    A[2, 1] = dpddot_dphi
    A[2, 2] = dpddot_dpdot
    A[2, 3] = dpddot_dphidot
    A[3, 1] = dphiddot_dphi
    A[3, 2] = dphiddot_dpdot
    A[3, 3] = dphiddot_dphidot

    B = np.zeros(4)
    B[2] = dpddot_du
    B[3] = dphiddot_du
    return A, B


@njit(cache=True)
def _rk4_step(s, u, dt, phys):
    """One classic Runge-Kutta step with zero-order-hold input; wraps the angle."""
    k1 = _deriv(s, u, phys)
    k2 = _deriv(s + 0.5 * dt * k1, u, phys)
    k3 = _deriv(s + 0.5 * dt * k2, u, phys)
    k4 = _deriv(s + dt * k3, u, phys)
    out = s + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    out[1] = wrap_angle(out[1])
    return out


@njit(cache=True)
def _rk4_step_jac(s, u, dt, phys):
    """RK4 step together with discrete Jacobians Fx (4x4) and Fu (4,).

    The Jacobians are chained exactly through the four stages; the final angle
    wrap is an additive constant shift, so it leaves them unchanged.
    """
    eye = np.eye(4)

    k1 = _deriv(s, u, phys)
    A1, B1 = _deriv_jac(s, u, phys)

    s2 = s + 0.5 * dt * k1
    k2 = _deriv(s2, u, phys)
    A2, B2 = _deriv_jac(s2, u, phys)
    dk2_dx = A2 @ (eye + 0.5 * dt * A1)
    dk2_du = A2 @ (0.5 * dt * B1) + B2

    s3 = s + 0.5 * dt * k2
    k3 = _deriv(s3, u, phys)
    A3, B3 = _deriv_jac(s3, u, phys)
    dk3_dx = A3 @ (eye + 0.5 * dt * dk2_dx)
    dk3_du = A3 @ (0.5 * dt * dk2_du) + B3

    s4 = s + dt * k3
    k4 = _deriv(s4, u, phys)
    A4, B4 = _deriv_jac(s4, u, phys)
    dk4_dx = A4 @ (eye + dt * dk3_dx)
    dk4_du = A4 @ (dt * dk3_du) + B4

    out = s + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    out[1] = wrap_angle(out[1])

    Fx = eye + (dt / 6.0) * (A1 + 2.0 * dk2_dx + 2.0 * dk3_dx + dk4_dx)
    Fu = (dt / 6.0) * (B1 + 2.0 * dk2_du + 2.0 * dk3_du + dk4_du)
    return out, Fx, Fu


@njit(cache=True)
def _integrate_substeps(s, u, dt, n_sub, rail, phys):
    """Integrate n_sub RK4 steps under one held input.

    Returns (state, status) with status 0 = ok, 1 = rail violation |p| > rail,
    2 = non-finite state.  Stops at the first offending substep.
    """
    out = s.copy()
    for _ in range(n_sub):
        out = _rk4_step(out, u, dt, phys)
        if not (np.isfinite(out[0]) and np.isfinite(out[1])
                and np.isfinite(out[2]) and np.isfinite(out[3])):
            return out, 2
        if np.abs(out[0]) > rail:
            return out, 1
    return out, 0


def continuous_dynamics(
    s: np.ndarray,
    u: float,
    theta: CartpoleParams,
    consts: CartpoleConstants,
) -> np.ndarray:
    """State derivative [pdot, phidot, pddot, phiddot] of the cartpole ODE."""
    theta.validate()
    consts.validate()
    s = np.asarray(s, dtype=float)
    phys = pack_physics(theta, consts)
    return _deriv(s, float(u), phys)


def step(
    s: np.ndarray,
    u: float,
    theta: CartpoleParams,
    consts: CartpoleConstants,
    dt: float,
) -> np.ndarray:
    """Advance the plant by one RK4 step of length dt; output angle re-wrapped."""
    if dt <= 0.0:
        raise ValueError(f"dt must be > 0, got {dt}")
    s = np.asarray(s, dtype=float)
    phys = pack_physics(theta, consts)
    return _rk4_step(s, float(u), float(dt), phys)
