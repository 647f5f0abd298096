"""Track and obstacle model: waypoint sequences, spherical obstacles, world
bounds, collision tests, procedural forest generation and domain
randomization of initial states and vehicle parameters.

A point collides with an obstacle when its distance to the obstacle center
falls below the safety distance r + arm_length + safety_margin; leaving the
bounds box also counts as a collision at the episode level.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from .dynamics import QuadrotorParams, QuadrotorState, quat_multiply, quat_normalize

DEFAULT_PASS_RADIUS = 0.5
DEFAULT_OBSTACLE_RADIUS = 0.5
DEFAULT_SAFETY_MARGIN = 0.2
DEFAULT_D_FAR = 100.0
DEFAULT_FOREST_BOUNDS = ((-25.0, -15.0, 0.0), (25.0, 10.0, 6.0))

# Nine-gate forest track, start at gate 1, finish at gate 9.
FOREST_WAYPOINTS = (
    (-20.0, 0.0, 1.12),
    (-15.0, -5.0, 1.12),
    (-10.0, -10.0, 1.12),
    (-5.0, -5.0, 1.12),
    (0.0, -10.0, 3.53),
    (5.0, -5.0, 1.12),
    (10.0, 0.0, 3.53),
    (15.0, 5.0, 3.53),
    (20.0, 0.0, 1.12),
)

# Representative seven-gate layout with one vertically stacked pair (gates 4
# and 5) forcing the descending half-roll turn. Shipping it as data keeps the
# coordinates replaceable through the config file.
SPLIT_S_WAYPOINTS = (
    (-6.0, -4.0, 1.2),
    (0.0, -6.0, 1.2),
    (6.0, -4.0, 1.2),
    (7.0, 2.0, 4.2),
    (7.0, 2.0, 1.2),
    (0.0, 6.0, 1.2),
    (-6.0, 2.0, 1.2),
)
SPLIT_S_OBSTACLES = (
    (3.0, -5.8, 1.4, 0.5),
    (7.6, -1.4, 2.6, 0.5),
    (3.6, 4.8, 1.4, 0.5),
    (-3.2, 4.6, 1.4, 0.5),
    (-6.8, -1.0, 1.3, 0.5),
    (0.8, -0.6, 2.2, 0.5),
)
SPLIT_S_BOUNDS = ((-12.0, -12.0, 0.0), (12.0, 12.0, 7.0))
SPLIT_S_JITTER_WAYPOINT = 1

# Minimum obstacle spacing per forest difficulty level. Level 1 uses a fixed
# spacing of about 5 m; levels 2 and 3 draw the spacing uniformly per world.
LEVEL_SPACING = {1: (5.0, 5.0), 2: (3.0, 5.0), 3: (1.0, 3.0)}
LEVEL_SPACING_BAND = {1: (4.5, None), 2: (3.0, 5.0), 3: (1.0, 3.0)}
LEVEL_TARGET_COUNT = {1: 48, 2: 64, 3: 120}


class WorldGenerationError(RuntimeError):
    """Raised when rejection sampling cannot produce a valid world."""


class CollisionStatus(enum.Enum):
    FREE = "free"
    OBSTACLE_HIT = "obstacle_hit"
    OUT_OF_BOUNDS = "out_of_bounds"


def _vec3(x, name):
    a = np.asarray(x, dtype=np.float64)
    if a.shape != (3,):
        raise ValueError(f"{name} must have shape (3,), got {a.shape}")
    return a


@dataclass(frozen=True)
class Waypoint:
    center: np.ndarray
    pass_radius: float = DEFAULT_PASS_RADIUS

    def __post_init__(self):
        object.__setattr__(self, "center", _vec3(self.center, "center"))
        if self.pass_radius <= 0:
            raise ValueError("pass_radius must be positive")


@dataclass(frozen=True)
class Obstacle:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", _vec3(self.center, "center"))
        if self.radius <= 0:
            raise ValueError("obstacle radius must be positive")


@dataclass(frozen=True)
class WorldSpec:
    track: tuple[Waypoint, ...]
    obstacles: tuple[Obstacle, ...] = ()
    bounds_min: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_FOREST_BOUNDS[0]))
    bounds_max: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_FOREST_BOUNDS[1]))
    safety_margin: float = DEFAULT_SAFETY_MARGIN
    jitter_waypoint: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "track", tuple(self.track))
        object.__setattr__(self, "obstacles", tuple(self.obstacles))
        object.__setattr__(self, "bounds_min", _vec3(self.bounds_min, "bounds_min"))
        object.__setattr__(self, "bounds_max", _vec3(self.bounds_max, "bounds_max"))
        if not self.track:
            raise ValueError("track must contain at least one waypoint")
        if np.any(self.bounds_min >= self.bounds_max):
            raise ValueError("bounds_min must be componentwise below bounds_max")
        for wp in self.track:
            if np.any(wp.center <= self.bounds_min) or np.any(wp.center >= self.bounds_max):
                raise ValueError(f"waypoint {wp.center} not strictly inside bounds")
        if self.jitter_waypoint is not None and not (0 <= self.jitter_waypoint < len(self.track)):
            raise ValueError("jitter_waypoint index out of range")
        if self.safety_margin < 0:
            raise ValueError("safety_margin must be non-negative")

    def track_centers(self) -> np.ndarray:
        return np.stack([wp.center for wp in self.track])

    def track_radii(self) -> np.ndarray:
        return np.array([wp.pass_radius for wp in self.track])

    def obstacle_centers(self) -> np.ndarray:
        if not self.obstacles:
            return np.zeros((0, 3))
        return np.stack([o.center for o in self.obstacles])

    def obstacle_radii(self) -> np.ndarray:
        return np.array([o.radius for o in self.obstacles])

    def min_obstacle_spacing(self) -> float:
        """Smallest center-to-center distance between any two obstacles."""
        c = self.obstacle_centers()
        if len(c) < 2:
            return float("inf")
        diff = c[:, None, :] - c[None, :, :]
        d = np.sqrt(np.sum(diff * diff, axis=-1))
        d[np.arange(len(c)), np.arange(len(c))] = np.inf
        return float(d.min())

    def waypoint_obstacle_clearance(self) -> float:
        """Smallest waypoint-center to obstacle-center distance minus radius."""
        if not self.obstacles:
            return float("inf")
        c = self.obstacle_centers()
        r = self.obstacle_radii()
        w = self.track_centers()
        d = np.sqrt(np.sum((w[:, None, :] - c[None, :, :]) ** 2, axis=-1)) - r[None, :]
        return float(d.min())

    def with_waypoint(self, index: int, center: np.ndarray) -> "WorldSpec":
        track = list(self.track)
        track[index] = replace(track[index], center=center)
        return replace(self, track=tuple(track))


@dataclass(frozen=True)
class RandomizationSpec:
    """Bounds for the per-episode initial-state and parameter draws."""

    position_delta: float = 1.0
    velocity_delta: float = 1.0
    orientation_delta: float = 1.0
    param_jitter: float = 0.1
    waypoint_jitter: float = 1.0
    forest_level_range: tuple[int, ...] = (1, 2, 3)

    def __post_init__(self):
        for name in ("position_delta", "velocity_delta", "orientation_delta", "param_jitter", "waypoint_jitter"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.param_jitter >= 1.0:
            raise ValueError("param_jitter must be below 1")
        object.__setattr__(self, "forest_level_range", tuple(int(v) for v in self.forest_level_range))
        for lv in self.forest_level_range:
            if lv not in LEVEL_SPACING:
                raise ValueError(f"unknown forest level {lv}")


def masked_surface_distances(p, centers, radii, valid):
    """Surface distances (center distance minus radius) with invalid slots
    masked to +inf. p: (K, 3); centers: (K, M, 3); radii/valid: (K, M)."""
    diff = p[:, None, :] - centers
    d = np.sqrt(diff[:, :, 0] ** 2 + diff[:, :, 1] ** 2 + diff[:, :, 2] ** 2) - radii
    return np.where(valid, d, np.inf)


def nearest_from_masked(d, n, d_far):
    """Ascending first-n selection from masked distances, padding with d_far."""
    k, m = d.shape
    d = np.sort(d, axis=1, kind="stable")
    if m < n:
        d = np.concatenate([d, np.full((k, n - m), np.inf)], axis=1)
    d = d[:, :n]
    return np.where(np.isinf(d), d_far, d)


def surface_distances_batch(p, centers, radii, valid, n, d_far):
    """Sorted surface distances to the nearest n obstacles, batched.

    Invalid rows pad as d_far after sorting, so a world with fewer than n
    obstacles reports d_far in the trailing slots.
    """
    k, m = valid.shape
    if m == 0:
        return np.full((k, n), d_far)
    return nearest_from_masked(masked_surface_distances(p, centers, radii, valid), n, d_far)


def nearest_obstacle_distances(p, world: WorldSpec, n: int, d_far: float = DEFAULT_D_FAR) -> np.ndarray:
    """Ascending surface distances (center distance minus radius) to the
    nearest n obstacles, padded with d_far when fewer exist."""
    if n < 1:
        raise ValueError("n must be at least 1")
    p = _vec3(p, "p")
    centers = world.obstacle_centers()[None, :, :]
    radii = world.obstacle_radii()[None, :]
    valid = np.ones(radii.shape, dtype=bool)
    return surface_distances_batch(p[None, :], centers, radii, valid, n, d_far)[0]


def check_collision(p, world: WorldSpec, params: QuadrotorParams) -> CollisionStatus:
    """Free / obstacle-hit / out-of-bounds test; obstacle hits win ties."""
    p = _vec3(p, "p")
    if world.obstacles:
        c = world.obstacle_centers()
        r = world.obstacle_radii()
        dist = np.sqrt(np.sum((c - p) ** 2, axis=-1))
        d_safe = r + params.arm_length + world.safety_margin
        if np.any(dist < d_safe):
            return CollisionStatus.OBSTACLE_HIT
    if np.any(p < world.bounds_min) or np.any(p > world.bounds_max):
        return CollisionStatus.OUT_OF_BOUNDS
    return CollisionStatus.FREE


def waypoint_passed(p, waypoint: Waypoint) -> bool:
    """Closed-ball passage test around the waypoint center."""
    p = _vec3(p, "p")
    d = p - waypoint.center
    return float(np.sqrt(d @ d)) <= waypoint.pass_radius


def forest_track(pass_radius: float = DEFAULT_PASS_RADIUS) -> tuple[Waypoint, ...]:
    """The nine-gate forest track."""
    return tuple(Waypoint(np.array(c), pass_radius) for c in FOREST_WAYPOINTS)


def split_s_world(
    obstacles=None,
    bounds=SPLIT_S_BOUNDS,
    pass_radius: float = DEFAULT_PASS_RADIUS,
    safety_margin: float = DEFAULT_SAFETY_MARGIN,
) -> WorldSpec:
    """Split-S style seven-gate world with one per-episode jittered gate."""
    if obstacles is None:
        obstacles = SPLIT_S_OBSTACLES
    track = tuple(Waypoint(np.array(c), pass_radius) for c in SPLIT_S_WAYPOINTS)
    obs = tuple(Obstacle(np.array(o[:3]), o[3]) for o in obstacles)
    return WorldSpec(
        track=track,
        obstacles=obs,
        bounds_min=np.array(bounds[0]),
        bounds_max=np.array(bounds[1]),
        safety_margin=safety_margin,
        jitter_waypoint=SPLIT_S_JITTER_WAYPOINT,
    )


def generate_forest(
    level: int,
    rng: np.random.Generator,
    bounds=DEFAULT_FOREST_BOUNDS,
    track: tuple[Waypoint, ...] | None = None,
    obstacle_radius: float = DEFAULT_OBSTACLE_RADIUS,
    safety_margin: float = DEFAULT_SAFETY_MARGIN,
    arm_length: float = 0.15,
    target_count: int | None = None,
    start_clearance: float = 2.0,
    max_world_retries: int = 50,
) -> WorldSpec:
    """Poisson-disk style forest: obstacles keep a level-dependent minimum
    spacing and stay clear of every waypoint. The realized minimum spacing is
    verified against the level band and the world is redrawn if it falls
    outside; sampling is fully driven by ``rng``."""
    if level not in LEVEL_SPACING:
        raise WorldGenerationError(f"unknown forest level {level}")
    if track is None:
        track = forest_track()
    lo = np.asarray(bounds[0], dtype=np.float64)
    hi = np.asarray(bounds[1], dtype=np.float64)
    centers_w = np.stack([wp.center for wp in track])
    # Obstacle centers must clear d_safe + pass_radius around each gate, and
    # extra room around the start gate so randomized spawns stay collision
    # free.
    clearance = obstacle_radius + arm_length + safety_margin + np.array([wp.pass_radius for wp in track])
    clearance[0] += start_clearance
    s_lo, s_hi = LEVEL_SPACING[level]
    band_lo, band_hi = LEVEL_SPACING_BAND[level]
    n_target = target_count if target_count is not None else LEVEL_TARGET_COUNT[level]
    place_lo = lo + obstacle_radius
    place_hi = hi - obstacle_radius
    if np.any(place_lo >= place_hi):
        raise WorldGenerationError("bounds too small for the obstacle radius")

    def min_spacing(points):
        arr = np.stack(points)
        dmat = np.sqrt(np.sum((arr[:, None, :] - arr[None, :, :]) ** 2, axis=-1))
        dmat[np.arange(len(arr)), np.arange(len(arr))] = np.inf
        return float(dmat.min())

    for _ in range(max_world_retries):
        spacing = s_lo if s_lo == s_hi else float(rng.uniform(s_lo, s_hi))
        pts: list[np.ndarray] = []
        for _ in range(n_target):
            placed = False
            for _ in range(100):
                cand = rng.uniform(place_lo, place_hi)
                if np.any(np.sqrt(np.sum((centers_w - cand) ** 2, axis=-1)) < clearance):
                    continue
                if pts:
                    d = np.sqrt(np.sum((np.stack(pts) - cand) ** 2, axis=-1))
                    if np.any(d < spacing):
                        continue
                pts.append(cand)
                placed = True
                break
            if not placed:
                break
        if len(pts) < 2:
            continue
        realized = min_spacing(pts)
        if band_hi is not None and realized > band_hi:
            # Sparse draw: anchor one extra obstacle just above the minimum
            # spacing so the realized spacing lands inside the band.
            d_pair = spacing + 0.1 * (band_hi - spacing)
            for _ in range(200):
                anchor = pts[int(rng.integers(len(pts)))]
                u = rng.normal(size=3)
                u /= np.sqrt(u @ u)
                cand = anchor + d_pair * u
                if np.any(cand < place_lo) or np.any(cand > place_hi):
                    continue
                if np.any(np.sqrt(np.sum((centers_w - cand) ** 2, axis=-1)) < clearance):
                    continue
                d = np.sqrt(np.sum((np.stack(pts) - cand) ** 2, axis=-1))
                to_anchor = np.sqrt(np.sum((np.stack(pts) - anchor) ** 2, axis=-1)) <= 1e-12
                if np.any(d[~to_anchor] < spacing):
                    continue
                pts.append(cand)
                realized = min_spacing(pts)
                break
        if realized < band_lo or (band_hi is not None and realized > band_hi):
            continue
        obstacles = tuple(Obstacle(p, obstacle_radius) for p in pts)
        return WorldSpec(
            track=track,
            obstacles=obstacles,
            bounds_min=lo,
            bounds_max=hi,
            safety_margin=safety_margin,
        )
    raise WorldGenerationError(f"could not generate a level-{level} forest within the spacing band")


def randomize_initial_state(base_state: QuadrotorState, spec: RandomizationSpec, rng: np.random.Generator) -> QuadrotorState:
    """Perturb position/velocity per axis and the attitude quaternion; body
    rate is zeroed and rotor thrusts are carried over from the base state
    (expected to be hover)."""
    position = base_state.position + rng.uniform(-spec.position_delta, spec.position_delta, 3)
    velocity = base_state.velocity + rng.uniform(-spec.velocity_delta, spec.velocity_delta, 3)
    u = rng.uniform(-spec.orientation_delta, spec.orientation_delta, 4)
    dq = np.array([1.0, 0.0, 0.0, 0.0]) + u
    dq = quat_normalize(dq)
    attitude = quat_normalize(quat_multiply(base_state.attitude, dq))
    return QuadrotorState(
        position=position,
        velocity=velocity,
        attitude=attitude,
        body_rate=np.zeros(3),
        rotor_thrusts=base_state.rotor_thrusts.copy(),
    )


def randomize_params(calibrated: QuadrotorParams, spec: RandomizationSpec, rng: np.random.Generator) -> QuadrotorParams:
    """Jitter the drag coefficients and the thrust-mapping constants (torque
    constant and arm length) by independent relative factors."""
    j = spec.param_jitter
    factors = rng.uniform(1.0 - j, 1.0 + j, 5)
    return replace(
        calibrated,
        drag=calibrated.drag * factors[:3],
        torque_const=calibrated.torque_const * factors[3],
        arm_length=calibrated.arm_length * factors[4],
    )
