"""
Kinematic bicycle model and a shooting MPC that tracks predicted waypoints.

State (x, y, theta, v), controls (a, delta), explicit Euler:

    x     += v cos(theta) dt
    y     += v sin(theta) dt
    theta += v tan(delta) / L dt      (pre-update v)
    v      = clip(v + a dt, 0, v_max)
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
from scipy.optimize import least_squares

from util.scene import wrap_angle

logger = logging.getLogger(__name__)

HEADING_MIN_DISPLACEMENT = 1e-3


class MpcError(RuntimeError):

    def __init__(self, message, nfev=None, last_cost=None):
        super().__init__(message if nfev is None else f"{message} (after {nfev} cost evaluations, last finite cost {last_cost})")
        self.nfev = nfev
        self.last_cost = last_cost


@dataclass(frozen=True)
class VehicleLimits:
    a_max: float = 3.0
    steer_max: float = 0.6
    v_max: float = 15.0
    wheelbase: float = 2.5

    def __post_init__(self):
        if min(self.a_max, self.steer_max, self.v_max, self.wheelbase) <= 0:
            raise ValueError(f"vehicle limits must be positive: {self}")


@dataclass(frozen=True)
class DynamicVehicle:
    x: float
    y: float
    theta: float
    v: float
    wheelbase: float = 2.5
    v_max: float = 15.0

    def __post_init__(self):
        if not self.wheelbase > 0 or not self.v_max > 0:
            raise ValueError(f"wheelbase and v_max must be positive, got {self.wheelbase}, {self.v_max}")
        if not math.isfinite(self.v):
            raise ValueError(f"speed must be finite, got {self.v}")
        object.__setattr__(self, "v", min(max(float(self.v), 0.0), self.v_max))
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta, self.v], dtype=np.float64)

    @classmethod
    def from_array(cls, state, wheelbase: float = 2.5, v_max: float = 15.0) -> "DynamicVehicle":
        return cls(float(state[0]), float(state[1]), float(state[2]), float(state[3]), wheelbase, v_max)


@dataclass(frozen=True)
class ControlCommand:
    accel: float = 0.0
    steer: float = 0.0


def step_bicycle(s: DynamicVehicle, u: ControlCommand, dt: float,
                 limits: VehicleLimits = VehicleLimits()) -> DynamicVehicle:
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    a = min(max(u.accel, -limits.a_max), limits.a_max)
    delta = min(max(u.steer, -limits.steer_max), limits.steer_max)
    x = s.x + s.v * math.cos(s.theta) * dt
    y = s.y + s.v * math.sin(s.theta) * dt
    theta = s.theta + s.v * math.tan(delta) / s.wheelbase * dt
    v = min(max(s.v + a * dt, 0.0), limits.v_max)
    return DynamicVehicle(x, y, theta, v, s.wheelbase, limits.v_max)


def rollout(state, controls, dt: float, limits: VehicleLimits) -> np.ndarray:
    """Batched Euler rollout.

    Args:
        state: initial (x, y, theta, v).
        controls: (B, J, 2) or (J, 2) accelerations and steering angles.

    Returns:
        States after each step, (B, J, 4) or (J, 4). Headings are not wrapped.
    """
    controls = np.asarray(controls, dtype=np.float64)
    single = controls.ndim == 2
    if single:
        controls = controls[None]
    batch, horizon = controls.shape[:2]
    a = np.clip(controls[..., 0], -limits.a_max, limits.a_max)
    curvature = np.tan(np.clip(controls[..., 1], -limits.steer_max, limits.steer_max)) / limits.wheelbase
    x = np.full(batch, state[0])
    y = np.full(batch, state[1])
    theta = np.full(batch, state[2])
    v = np.full(batch, state[3])
    out = np.empty((batch, horizon, 4))
    for i in range(horizon):
        x = x + v * np.cos(theta) * dt
        y = y + v * np.sin(theta) * dt
        theta = theta + v * curvature[:, i] * dt
        v = np.clip(v + a[:, i] * dt, 0.0, limits.v_max)
        out[:, i, 0] = x
        out[:, i, 1] = y
        out[:, i, 2] = theta
        out[:, i, 3] = v
    return out[0] if single else out


@dataclass(frozen=True, eq=False)
class MpcProblem:
    """Track `reference` rows (x, y, theta) over `horizon` steps of `dt`.

    With terminal_only the reference is a single row applied at the last step.
    """
    initial: DynamicVehicle
    reference: np.ndarray
    dt: float
    horizon: Optional[int] = None
    terminal_only: bool = False
    limits: VehicleLimits = VehicleLimits()

    def __post_init__(self):
        reference = np.array(self.reference, dtype=np.float64)
        if reference.ndim != 2 or reference.shape[1] != 3 or reference.shape[0] < 1:
            raise MpcError(f"reference must be (J, 3), got {reference.shape}")
        if not np.all(np.isfinite(reference)):
            raise MpcError("reference waypoints must be finite")
        if not self.dt > 0:
            raise MpcError(f"dt must be positive, got {self.dt}")
        horizon = self.horizon if self.horizon is not None else reference.shape[0]
        if horizon < 1:
            raise MpcError(f"horizon must be >= 1, got {horizon}")
        if self.terminal_only and reference.shape[0] != 1:
            raise MpcError("terminal-only problems take a single reference row")
        if not self.terminal_only and reference.shape[0] != horizon:
            raise MpcError(f"{reference.shape[0]} reference rows for horizon {horizon}")
        object.__setattr__(self, "reference", reference)
        object.__setattr__(self, "horizon", int(horizon))


@dataclass(frozen=True)
class MpcSettings:
    max_nfev: int = 30
    fd_eps: float = 1e-6
    tolerance: float = 1e-8


@dataclass
class MpcSolution:
    controls: np.ndarray
    rollout: np.ndarray
    cost: float
    zero_cost: float
    nfev: int
    source: str

    @property
    def commands(self) -> List[ControlCommand]:
        return [ControlCommand(float(a), float(d)) for a, d in self.controls]

    @property
    def first(self) -> ControlCommand:
        return ControlCommand(float(self.controls[0, 0]), float(self.controls[0, 1]))


class _Objective:

    def __init__(self, problem: MpcProblem, eps: float):
        self.problem = problem
        self.state = problem.initial.as_array()
        self.limits = VehicleLimits(problem.limits.a_max, problem.limits.steer_max,
                                    problem.limits.v_max, problem.initial.wheelbase)
        self.eps = eps
        self.nfev = 0
        self.last_cost = None

    def residuals_batch(self, flat: np.ndarray) -> np.ndarray:
        p = self.problem
        states = rollout(self.state, flat.reshape(flat.shape[0], p.horizon, 2), p.dt, self.limits)
        if p.terminal_only:
            states = states[:, -1:, :]
        res = np.empty(states.shape[:2] + (3,))
        res[..., :2] = states[..., :2] - p.reference[None, :, :2]
        res[..., 2] = wrap_angle(states[..., 2] - p.reference[None, :, 2])
        return res.reshape(flat.shape[0], -1)

    def __call__(self, u: np.ndarray) -> np.ndarray:
        self.nfev += 1
        r = self.residuals_batch(u[None])[0]
        if not np.all(np.isfinite(r)):
            raise MpcError("non-finite MPC cost", self.nfev, self.last_cost)
        self.last_cost = float(r @ r)
        return r

    def jacobian(self, u: np.ndarray) -> np.ndarray:
        n = u.shape[0]
        step = np.eye(n) * self.eps
        r = self.residuals_batch(np.concatenate([u + step, u - step]))
        diff = r[:n] - r[n:]
        # heading residuals may wrap between the two evaluations
        diff[:, 2::3] = wrap_angle(diff[:, 2::3])
        return (diff / (2 * self.eps)).T

    def cost(self, u: np.ndarray) -> float:
        r = self.residuals_batch(u[None])[0]
        return float(r @ r)


def solve_mpc(p: MpcProblem, warm_start=None, settings: MpcSettings = MpcSettings()) -> MpcSolution:
    """Minimize the summed squared (x, y, wrapped theta) tracking error over the control sequence.

    The result is the cheapest of the optimized, warm-start and zero-control
    sequences, so it never costs more than doing nothing.
    """
    objective = _Objective(p, settings.fd_eps)
    lower = np.tile([-p.limits.a_max, -p.limits.steer_max], p.horizon)
    upper = -lower
    zero = np.zeros(2 * p.horizon)
    candidates = [("zero", zero)]
    x0 = zero
    if warm_start is not None:
        warm = np.asarray(warm_start, dtype=np.float64).reshape(-1)
        if warm.shape != zero.shape:
            raise MpcError(f"warm start has {warm.shape[0]} values, expected {zero.shape[0]}")
        warm = np.clip(warm, lower, upper)
        candidates.append(("warm_start", warm))
        x0 = warm

    try:
        result = least_squares(objective, x0, jac=objective.jacobian, bounds=(lower, upper), method="trf",
                               max_nfev=settings.max_nfev, xtol=settings.tolerance,
                               ftol=settings.tolerance, gtol=settings.tolerance)
    except ValueError as e:
        raise MpcError(f"MPC solver failed: {e}", objective.nfev, objective.last_cost) from e
    candidates.append(("optimized", np.clip(result.x, lower, upper)))

    scored = [(objective.cost(u), -rank, name, u) for rank, (name, u) in enumerate(candidates)]
    zero_cost = scored[0][0]
    best_cost, _, source, best = min(scored, key=lambda item: item[:2])
    if not math.isfinite(best_cost):
        raise MpcError("non-finite MPC cost", objective.nfev, objective.last_cost)
    controls = best.reshape(p.horizon, 2)
    states = rollout(p.initial.as_array(), controls, p.dt, objective.limits)
    states[:, 2] = wrap_angle(states[:, 2])
    return MpcSolution(controls, states, best_cost, zero_cost, objective.nfev, source)


def solve_mpc_to_point(initial: DynamicVehicle, endpoint, J: int, dt: float,
                       limits: VehicleLimits = VehicleLimits(), warm_start=None,
                       settings: MpcSettings = MpcSettings()) -> MpcSolution:
    """Same solver with the cost applied only at the final step."""
    reference = np.asarray(endpoint, dtype=np.float64).reshape(1, 3)
    problem = MpcProblem(initial, reference, dt, horizon=J, terminal_only=True, limits=limits)
    return solve_mpc(problem, warm_start, settings)


def reference_from_points(initial: DynamicVehicle, points) -> np.ndarray:
    """(J, 2) predicted positions -> (J, 3) waypoints with headings.

    Heading i points from waypoint i to i+1 and the last waypoint reuses the
    previous heading. A single waypoint takes the heading from the vehicle to
    it. Displacements under a millimeter fall back to the vehicle heading.
    """
    points = np.asarray(points, dtype=np.float64)
    j = points.shape[0]
    if j == 1:
        steps = points - np.array([[initial.x, initial.y]])
    else:
        steps = np.diff(points, axis=0)
        steps = np.vstack([steps, steps[-1:]])
    headings = np.arctan2(steps[:, 1], steps[:, 0])
    short = np.linalg.norm(steps, axis=1) < HEADING_MIN_DISPLACEMENT
    headings[short] = initial.theta
    return np.column_stack([points, wrap_angle(headings)])


def shift_controls(controls, shift: float, dt: float) -> np.ndarray:
    """Re-sample a (J, 2) control plan `shift` seconds later, holding the last command."""
    controls = np.asarray(controls, dtype=np.float64)
    j = controls.shape[0]
    knots = np.arange(j) * dt
    query = np.minimum(knots + shift, knots[-1])
    return np.column_stack([np.interp(query, knots, controls[:, k]) for k in range(2)])


def track_points(initial: DynamicVehicle, points, dt: float, limits: VehicleLimits = VehicleLimits(),
                 warm_start=None, settings: MpcSettings = MpcSettings()) -> MpcSolution:
    """Convenience: MPC on predicted positions with derived reference headings."""
    reference = reference_from_points(initial, points)
    return solve_mpc(MpcProblem(initial, reference, dt, limits=limits), warm_start, settings)


def rollout_commands(initial: DynamicVehicle, commands: Sequence[ControlCommand], dt: float,
                     limits: VehicleLimits = VehicleLimits()) -> List[DynamicVehicle]:
    states = []
    s = initial
    for u in commands:
        s = step_bicycle(s, u, dt, limits)
        states.append(s)
    return states
