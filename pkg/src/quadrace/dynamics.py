"""Rigid-body quadrotor dynamics with first-order rotor lag and RK4 stepping.

State convention: position/velocity in the world frame, attitude as a unit
quaternion [w, x, y, z] rotating body vectors into the world frame, body rate
in the body frame, and the four rotor thrusts as the lagged actuator state.

Every operation here is a pure function. The private ``*_batch`` kernels act
on arrays with a leading environment axis and use only elementwise numpy
arithmetic (no axis reductions with data-dependent order), so stepping K
vehicles at once is bit-identical to stepping each one alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

GRAVITY = 9.81

_SQRT2 = np.sqrt(2.0)


class SimulationDiverged(RuntimeError):
    """Raised when an integration step produces non-finite state."""


def _vec(x, n, name):
    a = np.asarray(x, dtype=np.float64)
    if a.shape != (n,):
        raise ValueError(f"{name} must have shape ({n},), got {a.shape}")
    return a


@dataclass(frozen=True)
class QuadrotorParams:
    """Physical constants of one vehicle plus its low-level rate-loop gains."""

    mass: float = 1.0
    inertia: np.ndarray = field(default_factory=lambda: np.array([0.0025, 0.0021, 0.0043]))
    arm_length: float = 0.15
    torque_const: float = 0.022
    drag: np.ndarray = field(default_factory=lambda: np.array([0.26, 0.28, 0.42]))
    motor_tau: float = 0.05
    thrust_limits: tuple[float, float] = (0.0, 7.0)
    gravity: float = GRAVITY
    body_rate_gains: np.ndarray = field(default_factory=lambda: np.array([20.0, 20.0, 8.0]))

    def __post_init__(self):
        object.__setattr__(self, "inertia", _vec(self.inertia, 3, "inertia"))
        object.__setattr__(self, "drag", _vec(self.drag, 3, "drag"))
        object.__setattr__(self, "body_rate_gains", _vec(self.body_rate_gains, 3, "body_rate_gains"))
        object.__setattr__(self, "thrust_limits", (float(self.thrust_limits[0]), float(self.thrust_limits[1])))
        if self.mass <= 0 or self.arm_length <= 0 or self.motor_tau <= 0:
            raise ValueError("mass, arm_length and motor_tau must be positive")
        if np.any(self.inertia <= 0):
            raise ValueError("inertia components must be positive")
        if np.any(self.drag < 0):
            raise ValueError("drag coefficients must be non-negative")
        if np.any(self.body_rate_gains <= 0):
            raise ValueError("body_rate_gains must be positive")
        f_min, f_max = self.thrust_limits
        if not (0.0 <= f_min < f_max):
            raise ValueError("thrust_limits must satisfy 0 <= f_min < f_max")

    @property
    def hover_thrust(self) -> float:
        """Per-rotor thrust that balances weight."""
        return self.mass * self.gravity / 4.0


@dataclass
class QuadrotorState:
    position: np.ndarray
    velocity: np.ndarray
    attitude: np.ndarray
    body_rate: np.ndarray
    rotor_thrusts: np.ndarray

    def __post_init__(self):
        self.position = _vec(self.position, 3, "position")
        self.velocity = _vec(self.velocity, 3, "velocity")
        self.attitude = _vec(self.attitude, 4, "attitude")
        self.body_rate = _vec(self.body_rate, 3, "body_rate")
        self.rotor_thrusts = _vec(self.rotor_thrusts, 4, "rotor_thrusts")

    @classmethod
    def hover(cls, params: QuadrotorParams, position=(0.0, 0.0, 1.0)) -> "QuadrotorState":
        f = params.hover_thrust
        return cls(
            position=np.asarray(position, dtype=np.float64),
            velocity=np.zeros(3),
            attitude=np.array([1.0, 0.0, 0.0, 0.0]),
            body_rate=np.zeros(3),
            rotor_thrusts=np.full(4, f),
        )

    def copy(self) -> "QuadrotorState":
        return QuadrotorState(
            self.position.copy(),
            self.velocity.copy(),
            self.attitude.copy(),
            self.body_rate.copy(),
            self.rotor_thrusts.copy(),
        )


@dataclass(frozen=True)
class BodyCommand:
    """Collective thrust (N) plus body-rate setpoint (rad/s)."""

    collective_thrust: float
    body_rate_setpoint: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "body_rate_setpoint", _vec(self.body_rate_setpoint, 3, "body_rate_setpoint"))


@dataclass(frozen=True)
class Wrench:
    """Mass-normalized collective thrust (m/s^2) and body torque (N m)."""

    mass_norm_thrust: float
    torque: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "torque", _vec(self.torque, 3, "torque"))


class ParamsBatch:
    """Per-environment parameter arrays, one row per vehicle."""

    __slots__ = (
        "mass", "inertia", "arm_length", "torque_const", "drag",
        "motor_tau", "f_min", "f_max", "gravity", "gains", "n",
    )

    def __init__(self, params_list):
        n = len(params_list)
        self.n = n
        self.mass = np.array([p.mass for p in params_list])
        self.inertia = np.stack([p.inertia for p in params_list])
        self.arm_length = np.array([p.arm_length for p in params_list])
        self.torque_const = np.array([p.torque_const for p in params_list])
        self.drag = np.stack([p.drag for p in params_list])
        self.motor_tau = np.array([p.motor_tau for p in params_list])
        self.f_min = np.array([p.thrust_limits[0] for p in params_list])
        self.f_max = np.array([p.thrust_limits[1] for p in params_list])
        self.gravity = np.array([p.gravity for p in params_list])
        self.gains = np.stack([p.body_rate_gains for p in params_list])

    def set_row(self, k: int, p: QuadrotorParams):
        self.mass[k] = p.mass
        self.inertia[k] = p.inertia
        self.arm_length[k] = p.arm_length
        self.torque_const[k] = p.torque_const
        self.drag[k] = p.drag
        self.motor_tau[k] = p.motor_tau
        self.f_min[k] = p.thrust_limits[0]
        self.f_max[k] = p.thrust_limits[1]
        self.gravity[k] = p.gravity
        self.gains[k] = p.body_rate_gains


class StateBatch:
    """Mutable batch of vehicle states, shape (K, ...) per field."""

    __slots__ = ("p", "v", "q", "w", "f")

    def __init__(self, p, v, q, w, f):
        self.p, self.v, self.q, self.w, self.f = p, v, q, w, f

    @classmethod
    def zeros(cls, n: int) -> "StateBatch":
        q = np.zeros((n, 4))
        q[:, 0] = 1.0
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), q, np.zeros((n, 3)), np.zeros((n, 4)))

    @classmethod
    def from_state(cls, s: QuadrotorState) -> "StateBatch":
        return cls(
            s.position[None, :].copy(),
            s.velocity[None, :].copy(),
            s.attitude[None, :].copy(),
            s.body_rate[None, :].copy(),
            s.rotor_thrusts[None, :].copy(),
        )

    def state(self, k: int = 0) -> QuadrotorState:
        return QuadrotorState(
            self.p[k].copy(), self.v[k].copy(), self.q[k].copy(),
            self.w[k].copy(), self.f[k].copy(),
        )

    def set_row(self, k: int, s: QuadrotorState):
        self.p[k] = s.position
        self.v[k] = s.velocity
        self.q[k] = s.attitude
        self.w[k] = s.body_rate
        self.f[k] = s.rotor_thrusts


def quat_multiply(q: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Hamilton product, batched over leading axes."""
    qw, qx, qy, qz = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    rw, rx, ry, rz = r[..., 0], r[..., 1], r[..., 2], r[..., 3]
    return np.stack(
        [
            qw * rw - qx * rx - qy * ry - qz * rz,
            qw * rx + qx * rw + qy * rz - qz * ry,
            qw * ry - qx * rz + qy * rw + qz * rx,
            qw * rz + qx * ry - qy * rx + qz * rw,
        ],
        axis=-1,
    )


def quat_normalize(q: np.ndarray) -> np.ndarray:
    n = np.sqrt(q[..., 0] ** 2 + q[..., 1] ** 2 + q[..., 2] ** 2 + q[..., 3] ** 2)
    return q / n[..., None]


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate body-frame vectors into the world frame."""
    qw = q[..., 0]
    qv = q[..., 1:4]
    t = 2.0 * np.cross(qv, v)
    return v + qw[..., None] * t + np.cross(qv, t)


def quat_rotate_inv(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate world-frame vectors into the body frame."""
    qw = q[..., 0]
    qv = q[..., 1:4]
    t = -2.0 * np.cross(qv, v)
    return v + qw[..., None] * t + np.cross(-qv, t)


def quat_to_rotmat_flat(q: np.ndarray) -> np.ndarray:
    """Row-major flattened rotation matrix, shape (..., 9)."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )


def _wrench_batch(f: np.ndarray, par: ParamsBatch):
    """Rotor thrusts (K, 4) -> mass-normalized thrust (K,) and torque (K, 3)."""
    f1, f2, f3, f4 = f[:, 0], f[:, 1], f[:, 2], f[:, 3]
    a = par.arm_length / _SQRT2
    eta = np.stack(
        [
            a * (f1 - f2 - f3 + f4),
            a * (-f1 - f2 + f3 + f4),
            par.torque_const * (f1 - f2 + f3 - f4),
        ],
        axis=-1,
    )
    c = (f1 + f2 + f3 + f4) / par.mass
    return c, eta


def _alloc_batch(f_sum: np.ndarray, eta: np.ndarray, par: ParamsBatch):
    """Invert the thrust-to-wrench map and clamp to rotor limits.

    The mixer has orthogonal sign columns, so the inverse is closed form:
    f_i = F/4 + s1_i ex + s2_i ey + s3_i ez with ex = eta_x/(4a), etc.
    """
    a = par.arm_length / _SQRT2
    ex = eta[:, 0] / (4.0 * a)
    ey = eta[:, 1] / (4.0 * a)
    ez = eta[:, 2] / (4.0 * par.torque_const)
    base = f_sum / 4.0
    f = np.stack(
        [
            base + ex - ey + ez,
            base - ex - ey - ez,
            base - ex + ey + ez,
            base + ex + ey - ez,
        ],
        axis=-1,
    )
    lo = par.f_min[:, None]
    hi = par.f_max[:, None]
    clamped = np.clip(f, lo, hi)
    saturated = (f < lo) | (f > hi)
    saturated = saturated[:, 0] | saturated[:, 1] | saturated[:, 2] | saturated[:, 3]
    return clamped, saturated


def _rate_control_batch(sb: StateBatch, f_total: np.ndarray, omega_des: np.ndarray, par: ParamsBatch):
    """Proportional body-rate loop with gyroscopic feed-forward."""
    w = sb.w
    jw = par.inertia * w
    gyro = np.cross(w, jw)
    eta_des = par.inertia * (par.gains * (omega_des - w)) + gyro
    f_sum = np.clip(f_total, 4.0 * par.f_min, 4.0 * par.f_max)
    f_des, _ = _alloc_batch(f_sum, eta_des, par)
    return f_des


def _deriv_batch(sb: StateBatch, f_des: np.ndarray, par: ParamsBatch) -> StateBatch:
    q = sb.q
    v = sb.v
    w = sb.w
    c, eta = _wrench_batch(sb.f, par)

    qw, qx, qy, qz = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    # World-frame thrust: third column of R times the mass-normalized thrust.
    thrust = np.stack(
        [
            2.0 * (qx * qz + qw * qy) * c,
            2.0 * (qy * qz - qw * qx) * c,
            (1.0 - 2.0 * (qx * qx + qy * qy)) * c,
        ],
        axis=-1,
    )
    # Linear drag: -R D R^T v with v in the world frame.
    v_body = quat_rotate_inv(q, v)
    drag = quat_rotate(q, par.drag * v_body)

    v_dot = thrust - drag
    v_dot[:, 2] -= par.gravity

    wq = np.concatenate([np.zeros((q.shape[0], 1)), w], axis=-1)
    q_dot = 0.5 * quat_multiply(q, wq)

    jw = par.inertia * w
    w_dot = (eta - np.cross(w, jw)) / par.inertia

    f_dot = (f_des - sb.f) / par.motor_tau[:, None]
    return StateBatch(v.copy(), v_dot, q_dot, w_dot, f_dot)


def _axpy(s: StateBatch, k: StateBatch, a: float) -> StateBatch:
    return StateBatch(s.p + a * k.p, s.v + a * k.v, s.q + a * k.q, s.w + a * k.w, s.f + a * k.f)


def _rk4_batch(sb: StateBatch, f_des: np.ndarray, dt: float, par: ParamsBatch) -> StateBatch:
    """Classical RK4 with the thrust command held constant over the step.

    Overflow is deliberately silenced; callers detect divergence through the
    finiteness of the result.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        k1 = _deriv_batch(sb, f_des, par)
        k2 = _deriv_batch(_axpy(sb, k1, 0.5 * dt), f_des, par)
        k3 = _deriv_batch(_axpy(sb, k2, 0.5 * dt), f_des, par)
        k4 = _deriv_batch(_axpy(sb, k3, dt), f_des, par)
        sixth = dt / 6.0
        out = StateBatch(
            sb.p + sixth * (k1.p + 2.0 * k2.p + 2.0 * k3.p + k4.p),
            sb.v + sixth * (k1.v + 2.0 * k2.v + 2.0 * k3.v + k4.v),
            sb.q + sixth * (k1.q + 2.0 * k2.q + 2.0 * k3.q + k4.q),
            sb.w + sixth * (k1.w + 2.0 * k2.w + 2.0 * k3.w + k4.w),
            sb.f + sixth * (k1.f + 2.0 * k2.f + 2.0 * k3.f + k4.f),
        )
        out.q = quat_normalize(out.q)
    out.f = np.clip(out.f, par.f_min[:, None], par.f_max[:, None])
    return out


def _single(params: QuadrotorParams) -> ParamsBatch:
    return ParamsBatch([params])


def wrench_from_thrusts(rotor_thrusts, params: QuadrotorParams) -> Wrench:
    """Map the four rotor thrusts to the collective/torque wrench."""
    f = _vec(rotor_thrusts, 4, "rotor_thrusts")[None, :]
    c, eta = _wrench_batch(f, _single(params))
    return Wrench(float(c[0]), eta[0])


def thrust_allocation(wrench: Wrench, params: QuadrotorParams):
    """Invert the wrench map; returns (rotor thrusts, saturation flag)."""
    f_sum = np.array([wrench.mass_norm_thrust * params.mass])
    f, sat = _alloc_batch(f_sum, wrench.torque[None, :], _single(params))
    return f[0], bool(sat[0])


def body_rate_controller(state: QuadrotorState, command: BodyCommand, params: QuadrotorParams) -> np.ndarray:
    """Desired rotor thrusts tracking a collective-thrust / body-rate command."""
    sb = StateBatch.from_state(state)
    f_des = _rate_control_batch(
        sb,
        np.array([command.collective_thrust]),
        command.body_rate_setpoint[None, :],
        _single(params),
    )
    return f_des[0]


def state_derivative(state: QuadrotorState, rotor_thrust_cmd, params: QuadrotorParams) -> QuadrotorState:
    """Continuous-time derivative; the returned object holds d/dt of each field."""
    if abs(float(np.linalg.norm(state.attitude)) - 1.0) > 1e-6:
        raise ValueError("attitude quaternion must be unit norm")
    f_des = _vec(rotor_thrust_cmd, 4, "rotor_thrust_cmd")
    sb = StateBatch.from_state(state)
    d = _deriv_batch(sb, f_des[None, :], _single(params))
    return d.state(0)


def rk4_step(state: QuadrotorState, rotor_thrust_cmd, dt: float, params: QuadrotorParams) -> QuadrotorState:
    """One RK4 step; renormalizes the attitude and clamps rotor thrusts."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    f_des = _vec(rotor_thrust_cmd, 4, "rotor_thrust_cmd")
    sb = StateBatch.from_state(state)
    out = _rk4_batch(sb, f_des[None, :], dt, _single(params))
    if not (
        np.all(np.isfinite(out.p)) and np.all(np.isfinite(out.v))
        and np.all(np.isfinite(out.q)) and np.all(np.isfinite(out.w))
        and np.all(np.isfinite(out.f))
    ):
        raise SimulationDiverged("non-finite state after integration step")
    return out.state(0)
