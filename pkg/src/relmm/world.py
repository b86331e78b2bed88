"""2D room-cleanup simulator.

A point robot with a forward-facing reachable rectangle (the grasp region)
drives around a walled room picking up small static discs. Every operation is
a pure function ``WorldState -> WorldState``; randomness comes from the
PCG64 state carried inside the world state itself.

Coordinates: world frame in metres with the room spanning ``[0, W] x [0, H]``;
robot frame has +x along the heading and +y to the robot's left.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import IntEnum
from functools import lru_cache
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import rng as rngmod


class ConfigurationError(ValueError):
    """Invalid room/simulation configuration."""


class LogicError(RuntimeError):
    """An operation was called in a state its contract forbids."""


class ObjectStatus(IntEnum):
    FREE = 0
    HELD = 1
    COLLECTED = 2


# ---------------------------------------------------------------------------
# static configuration

Rect = Tuple[float, float, float, float]  # xmin, ymin, xmax, ymax


@dataclass(frozen=True)
class RoomSpec:
    width: float = 3.0
    height: float = 3.0
    obstacles: Tuple[Rect, ...] = ()
    object_count: int = 20
    object_radius: float = 0.02

    def __post_init__(self):
        object.__setattr__(self, "obstacles", tuple(tuple(map(float, r)) for r in self.obstacles))
        if self.width <= 0 or self.height <= 0:
            raise ConfigurationError("room dimensions must be positive")
        if self.object_count <= 0:
            raise ConfigurationError("object_count must be positive")
        if self.object_radius <= 0:
            raise ConfigurationError("object_radius must be positive")
        for r in self.obstacles:
            x0, y0, x1, y1 = r
            if not (0 < x0 < x1 < self.width and 0 < y0 < y1 < self.height):
                raise ConfigurationError(f"obstacle {r} is not strictly inside the room")


@dataclass(frozen=True)
class GraspRegion:
    x_range: Tuple[float, float] = (0.30, 0.47)
    y_range: Tuple[float, float] = (-0.08, 0.08)
    cells: int = 15

    @property
    def dx(self) -> float:
        return (self.x_range[1] - self.x_range[0]) / self.cells

    @property
    def dy(self) -> float:
        return (self.y_range[1] - self.y_range[0]) / self.cells

    @property
    def n_actions(self) -> int:
        return self.cells * self.cells

    def corners(self) -> np.ndarray:
        (x0, x1), (y0, y1) = self.x_range, self.y_range
        return np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]])

    def cell_center(self, cell) -> Tuple[float, float]:
        i, j = self.unflatten(cell)
        return (self.x_range[0] + (i + 0.5) * self.dx,
                self.y_range[0] + (j + 0.5) * self.dy)

    def unflatten(self, cell) -> Tuple[int, int]:
        if isinstance(cell, (tuple, list)):
            i, j = int(cell[0]), int(cell[1])
        else:
            i, j = divmod(int(cell), self.cells)
        if not (0 <= i < self.cells and 0 <= j < self.cells):
            raise ValueError(f"grasp cell {cell} out of range")
        return i, j

    def flatten(self, i: int, j: int) -> int:
        return int(i) * self.cells + int(j)

    def _index(self, v: float, lo: float, hi: float) -> Optional[int]:
        if v < lo or v > hi:
            return None
        k = int(math.floor((v - lo) / (hi - lo) * self.cells))
        return min(k, self.cells - 1)  # last cell is closed

    def cell_of(self, x: float, y: float) -> Optional[int]:
        """Flat cell index of a robot-frame point, or None outside the region.

        Cells are half-open ``[lo, hi)`` except the last one along each axis,
        which is closed, so every point of the rectangle maps to one cell.
        """
        i = self._index(x, *self.x_range)
        j = self._index(y, *self.y_range)
        if i is None or j is None:
            return None
        return self.flatten(i, j)

    def contains(self, x: float, y: float) -> bool:
        return (self.x_range[0] <= x <= self.x_range[1]
                and self.y_range[0] <= y <= self.y_range[1])

    def default_tolerance(self) -> float:
        return math.hypot(self.dx, self.dy)


GRASP_REGION = GraspRegion()


@dataclass(frozen=True)
class SimParams:
    grid: int = 32
    crop: int = 16
    fov_deg: float = 90.0
    view_range: float = 1.5
    grasp_tolerance: float = GRASP_REGION.default_tolerance()
    max_forward: float = 0.1
    max_turn: float = math.pi / 12
    guard_turn: float = math.pi / 12
    reset_walk: Tuple[int, int] = (8, 8)
    max_placement_attempts: int = 10_000
    region: GraspRegion = GRASP_REGION

    def __post_init__(self):
        if self.crop > self.grid or (self.grid - self.crop) % 2:
            raise ConfigurationError("crop must fit the grid with equal side margins")


DEFAULT_SIM = SimParams()


# ---------------------------------------------------------------------------
# state


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    heading: float


@dataclass(frozen=True)
class ObjectState:
    position: Tuple[float, float]
    status: ObjectStatus


def wrap_angle(a: float) -> float:
    """Map an angle to (-pi, pi]."""
    a = math.fmod(a, 2 * math.pi)
    if a <= -math.pi:
        a += 2 * math.pi
    elif a > math.pi:
        a -= 2 * math.pi
    return a


@dataclass
class WorldState:
    room: RoomSpec
    pose: Pose
    positions: np.ndarray            # (N, 2) float64, world frame
    status: np.ndarray               # (N,) int8, ObjectStatus values
    rng_state: dict
    step_count: int = 0
    grasp_count: int = 0
    sim: SimParams = field(default=DEFAULT_SIM)

    @property
    def objects(self) -> List[ObjectState]:
        return [ObjectState((float(p[0]), float(p[1])), ObjectStatus(int(s)))
                for p, s in zip(self.positions, self.status)]

    def count(self, status: ObjectStatus) -> int:
        return int(np.sum(self.status == status))

    @property
    def holding(self) -> bool:
        return bool(np.any(self.status == ObjectStatus.HELD))

    def copy(self, **changes) -> "WorldState":
        base = dict(positions=self.positions.copy(), status=self.status.copy())
        base.update(changes)
        return replace(self, **base)

    def to_dict(self) -> dict:
        return {
            "pose": [self.pose.x, self.pose.y, self.pose.heading],
            "positions": self.positions.tolist(),
            "status": self.status.tolist(),
            "rng_state": self.rng_state,
            "step_count": self.step_count,
            "grasp_count": self.grasp_count,
        }

    @classmethod
    def from_dict(cls, d: dict, room: RoomSpec, sim: SimParams = DEFAULT_SIM) -> "WorldState":
        return cls(room=room, pose=Pose(*d["pose"]),
                   positions=np.array(d["positions"], dtype=np.float64).reshape(-1, 2),
                   status=np.array(d["status"], dtype=np.int8),
                   rng_state=d["rng_state"], step_count=d["step_count"],
                   grasp_count=d["grasp_count"], sim=sim)

    def same_as(self, other: "WorldState") -> bool:
        return (self.pose == other.pose and self.step_count == other.step_count
                and self.grasp_count == other.grasp_count
                and np.array_equal(self.positions, other.positions)
                and np.array_equal(self.status, other.status)
                and self.rng_state == other.rng_state)


# ---------------------------------------------------------------------------
# geometry helpers


def to_robot_frame(pose: Pose, pts: np.ndarray) -> np.ndarray:
    c, s = math.cos(pose.heading), math.sin(pose.heading)
    d = np.asarray(pts, dtype=np.float64) - (pose.x, pose.y)
    return np.stack([c * d[..., 0] + s * d[..., 1], -s * d[..., 0] + c * d[..., 1]], axis=-1)


def to_world_frame(pose: Pose, pts: np.ndarray) -> np.ndarray:
    c, s = math.cos(pose.heading), math.sin(pose.heading)
    p = np.asarray(pts, dtype=np.float64)
    return np.stack([pose.x + c * p[..., 0] - s * p[..., 1],
                     pose.y + s * p[..., 0] + c * p[..., 1]], axis=-1)


def point_in_obstacle(room: RoomSpec, x: float, y: float) -> bool:
    return any(x0 < x < x1 and y0 < y < y1 for x0, y0, x1, y1 in room.obstacles)


def _disc_clear_of_obstacles(room: RoomSpec, p: np.ndarray, r: float) -> bool:
    for x0, y0, x1, y1 in room.obstacles:
        dx = max(x0 - p[0], 0.0, p[0] - x1)
        dy = max(y0 - p[1], 0.0, p[1] - y1)
        if dx * dx + dy * dy < r * r:
            return False
    return True


def segment_hit(room: RoomSpec, x: float, y: float, ux: float, uy: float, dist: float) -> float:
    """Largest travel in ``[0, dist]`` along unit ``(ux, uy)`` before any contact."""
    t = dist
    w, h = room.width, room.height
    if ux > 0:
        t = min(t, (w - x) / ux)
    elif ux < 0:
        t = min(t, -x / ux)
    if uy > 0:
        t = min(t, (h - y) / uy)
    elif uy < 0:
        t = min(t, -y / uy)
    for x0, y0, x1, y1 in room.obstacles:
        t_in, t_out = -math.inf, math.inf
        hit = True
        for p, u, lo, hi in ((x, ux, x0, x1), (y, uy, y0, y1)):
            if u == 0.0:
                if not (lo < p < hi):
                    hit = False
                    break
            else:
                a, b = (lo - p) / u, (hi - p) / u
                if a > b:
                    a, b = b, a
                t_in, t_out = max(t_in, a), min(t_out, b)
        if hit and t_in < t_out and t_out > 0:
            t = min(t, max(t_in, 0.0))
    return max(t, 0.0)


def region_corners_world(state: WorldState) -> np.ndarray:
    return to_world_frame(state.pose, state.sim.region.corners())


def _rect_overlaps_polygon(rect: Rect, poly: np.ndarray) -> bool:
    """Separating-axis test between an axis-aligned rect and a convex quad."""
    x0, y0, x1, y1 = rect
    box = np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]])
    edge = poly[1] - poly[0]
    axes = [np.array([1.0, 0.0]), np.array([0.0, 1.0]), edge, np.array([-edge[1], edge[0]])]
    for ax in axes:
        pa, pb = box @ ax, poly @ ax
        if pa.max() <= pb.min() or pb.max() <= pa.min():
            return False
    return True


def grasp_region_blocked(state: WorldState) -> bool:
    """True when a wall or obstacle intrudes into the world-frame grasp region."""
    poly = region_corners_world(state)
    room = state.room
    if np.any(poly[:, 0] < 0) or np.any(poly[:, 0] > room.width) \
            or np.any(poly[:, 1] < 0) or np.any(poly[:, 1] > room.height):
        return True
    return any(_rect_overlaps_polygon(r, poly) for r in room.obstacles)


# ---------------------------------------------------------------------------
# operations


def _free_point(room: RoomSpec, rng: np.random.Generator, margin: float) -> np.ndarray:
    p = rng.uniform((margin, margin), (room.width - margin, room.height - margin))
    return p


def scatter_objects(room: RoomSpec, seed, sim: SimParams = DEFAULT_SIM) -> WorldState:
    """Fresh world: objects and robot placed uniformly on free floor."""
    gen = seed if isinstance(seed, np.random.Generator) else rngmod.stream(int(seed), "world")
    r = room.object_radius
    placed: List[np.ndarray] = []
    attempts = 0
    while len(placed) < room.object_count:
        attempts += 1
        if attempts > sim.max_placement_attempts:
            raise ConfigurationError(
                f"could not place {room.object_count} objects in "
                f"{sim.max_placement_attempts} attempts; room too crowded")
        p = _free_point(room, gen, r)
        if not _disc_clear_of_obstacles(room, p, r):
            continue
        # overlap by at most half a radius
        if any(np.hypot(*(p - q)) < 1.5 * r for q in placed):
            continue
        placed.append(p)
    while True:
        attempts += 1
        if attempts > sim.max_placement_attempts:
            raise ConfigurationError("could not place the robot on free floor")
        p = _free_point(room, gen, 0.0)
        if not point_in_obstacle(room, p[0], p[1]):
            break
    heading = wrap_angle(float(gen.uniform(-math.pi, math.pi)))
    state = WorldState(room=room, pose=Pose(float(p[0]), float(p[1]), heading),
                       positions=np.array(placed, dtype=np.float64).reshape(-1, 2),
                       status=np.zeros(room.object_count, dtype=np.int8),
                       rng_state=rngmod.get_state(gen), sim=sim)
    return obstacle_guard(state)


def _check_action(a) -> Tuple[float, float]:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    if a.shape != (2,) or not np.all(np.isfinite(a)):
        raise ValueError(f"navigation action must be two finite floats, got {a}")
    return float(np.clip(a[0], -1.0, 1.0)), float(np.clip(a[1], -1.0, 1.0))


def _translate(state: WorldState, heading: float, dist: float) -> Tuple[float, float]:
    x, y = state.pose.x, state.pose.y
    ux, uy = math.cos(heading), math.sin(heading)
    t = segment_hit(state.room, x, y, ux, uy, dist)
    if t < dist:
        t = max(t - 1e-9, 0.0)
    nx = min(max(x + t * ux, 0.0), state.room.width)
    ny = min(max(y + t * uy, 0.0), state.room.height)
    return nx, ny


def step_base(state: WorldState, a_n) -> WorldState:
    """Turn by ``a[1] * max_turn``, then drive ``(a[0] + 1) / 2 * max_forward``."""
    fwd, turn = _check_action(a_n)
    heading = wrap_angle(state.pose.heading + turn * state.sim.max_turn)
    dist = (fwd + 1.0) * 0.5 * state.sim.max_forward
    x, y = _translate(state, heading, dist) if dist > 0 else (state.pose.x, state.pose.y)
    return state.copy(pose=Pose(x, y, heading), step_count=state.step_count + 1)


def obstacle_guard(state: WorldState) -> WorldState:
    """Turn in a random direction until the grasp region is clear of walls/obstacles.

    One random turn direction per call; after a full rotation without success
    the robot backs up one step and tries again (three rounds at most).
    """
    if not grasp_region_blocked(state):
        return state
    gen = rngmod.from_state(state.rng_state)
    sim = state.sim
    sign = 1.0 if gen.random() < 0.5 else -1.0
    n_turns = int(math.ceil(2 * math.pi / sim.guard_turn))
    cur = state.copy()
    for _ in range(3):
        for _ in range(n_turns):
            p = cur.pose
            cur = replace(cur, pose=Pose(p.x, p.y, wrap_angle(p.heading + sign * sim.guard_turn)))
            if not grasp_region_blocked(cur):
                return replace(cur, rng_state=rngmod.get_state(gen))
        p = cur.pose
        x, y = _translate(cur, wrap_angle(p.heading + math.pi), sim.max_forward)
        cur = replace(cur, pose=Pose(x, y, p.heading))
        if not grasp_region_blocked(cur):
            break
    return replace(cur, rng_state=rngmod.get_state(gen))


def advance(state: WorldState, a_n) -> WorldState:
    """One base step followed by the obstacle guard."""
    return obstacle_guard(step_base(state, a_n))


def _grasp_at(state: WorldState, x: float, y: float) -> Tuple[WorldState, int]:
    if state.holding:
        raise LogicError("grasp attempted while already holding an object")
    free = np.flatnonzero(state.status == ObjectStatus.FREE)
    new = state.copy(grasp_count=state.grasp_count + 1)
    if free.size == 0:
        return new, 0
    rel = to_robot_frame(state.pose, state.positions[free])
    d = np.hypot(rel[:, 0] - x, rel[:, 1] - y)
    k = int(np.argmin(d))
    if d[k] > state.sim.grasp_tolerance:
        return new, 0
    new.status[free[k]] = ObjectStatus.HELD
    return new, 1


def attempt_grasp(state: WorldState, cell) -> Tuple[WorldState, int]:
    """Top-down grasp at the centre of a grasp-grid cell."""
    x, y = state.sim.region.cell_center(cell)
    return _grasp_at(state, x, y)


def attempt_grasp_at(state: WorldState, x: float, y: float) -> Tuple[WorldState, int]:
    """Grasp at an arbitrary robot-frame point inside the grasp region."""
    if not state.sim.region.contains(x, y):
        raise ValueError(f"grasp point ({x}, {y}) outside the grasp region")
    return _grasp_at(state, x, y)


def deposit_held(state: WorldState) -> WorldState:
    """Move the held object into the basket."""
    held = np.flatnonzero(state.status == ObjectStatus.HELD)
    if held.size != 1:
        raise LogicError("deposit_held needs exactly one held object")
    new = state.copy()
    new.status[held[0]] = ObjectStatus.COLLECTED
    return new


def drop_in_region(state: WorldState, gen: np.random.Generator) -> WorldState:
    """Release the held object at a uniform point of the current grasp region."""
    held = np.flatnonzero(state.status == ObjectStatus.HELD)
    if held.size != 1:
        raise LogicError("drop needs exactly one held object")
    reg = state.sim.region
    local = gen.uniform((reg.x_range[0], reg.y_range[0]), (reg.x_range[1], reg.y_range[1]))
    new = state.copy()
    new.positions[held[0]] = to_world_frame(state.pose, local)
    new.status[held[0]] = ObjectStatus.FREE
    return new


def random_walk(state: WorldState, steps: int, gen: np.random.Generator) -> WorldState:
    for _ in range(steps):
        a = gen.uniform(-1.0, 1.0, 2)
        state = obstacle_guard(replace(step_base(state, a), rng_state=rngmod.get_state(gen)))
        rngmod.set_state(gen, state.rng_state)
    return state


def pseudo_reset(state: WorldState, k1: Optional[int] = None,
                 k2: Optional[int] = None) -> WorldState:
    """Carry the held object on a random walk, drop it, then wander away."""
    if state.count(ObjectStatus.HELD) != 1:
        raise LogicError("pseudo_reset needs exactly one held object")
    k1 = state.sim.reset_walk[0] if k1 is None else k1
    k2 = state.sim.reset_walk[1] if k2 is None else k2
    gen = rngmod.from_state(state.rng_state)
    state = random_walk(state, k1, gen)
    state = obstacle_guard(replace(state, rng_state=rngmod.get_state(gen)))
    rngmod.set_state(gen, state.rng_state)
    state = drop_in_region(state, gen)
    state = replace(state, rng_state=rngmod.get_state(gen))
    return random_walk(state, k2, gen)


# ---------------------------------------------------------------------------
# rendering

N_CHANNELS = 3
CH_OBJECTS, CH_OBSTACLES, CH_FLOOR = 0, 1, 2


@dataclass(frozen=True)
class ViewGrid:
    """Foveated ego-centric raster.

    Rows run far -> near along robot +x, columns run left -> right (robot +y
    to -y). The central ``crop x crop`` block covers the grasp region exactly;
    the rest of the field of view is covered by coarser cells.
    """

    x_lo: np.ndarray
    x_hi: np.ndarray
    y_lo: np.ndarray
    y_hi: np.ndarray
    row0: int
    col0: int
    crop: int

    @property
    def x_center(self) -> np.ndarray:
        return 0.5 * (self.x_lo + self.x_hi)

    @property
    def y_center(self) -> np.ndarray:
        return 0.5 * (self.y_lo + self.y_hi)


def _edges(lo: float, hi: float, n: int) -> np.ndarray:
    return np.linspace(lo, hi, n + 1)


@lru_cache(maxsize=8)
def view_grid(sim: SimParams = DEFAULT_SIM) -> ViewGrid:
    g, c = sim.grid, sim.crop
    reg = sim.region
    n_near = max(1, g // 8)
    n_far = g - c - n_near
    if n_far < 1:
        raise ConfigurationError("grid too small for the crop")
    side = (g - c) // 2
    y_max = sim.view_range * math.sin(math.radians(sim.fov_deg / 2))
    # far -> near
    x_edges = np.concatenate([_edges(sim.view_range, reg.x_range[1], n_far),
                              _edges(reg.x_range[1], reg.x_range[0], c)[1:],
                              _edges(reg.x_range[0], 0.0, n_near)[1:]])
    # left (+y) -> right (-y)
    y_edges = np.concatenate([_edges(y_max, reg.y_range[1], side),
                              _edges(reg.y_range[1], reg.y_range[0], c)[1:],
                              _edges(reg.y_range[0], -y_max, side)[1:]])
    return ViewGrid(x_lo=x_edges[1:], x_hi=x_edges[:-1], y_lo=y_edges[1:], y_hi=y_edges[:-1],
                    row0=n_far, col0=side, crop=c)


def _in_view(sim: SimParams, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    half = math.radians(sim.fov_deg / 2)
    return (x > 0) & (np.abs(np.arctan2(y, x)) <= half + 1e-12) & (np.hypot(x, y) <= sim.view_range)


@lru_cache(maxsize=8)
def _view_mask(sim: SimParams) -> np.ndarray:
    vg = view_grid(sim)
    xc, yc = np.meshgrid(vg.x_center, vg.y_center, indexing="ij")
    return _in_view(sim, xc, yc)


def render_nav_obs(state: WorldState) -> np.ndarray:
    """(3, G, G) float32 image in [0, 1], quantised to 1/255 steps."""
    sim = state.sim
    vg = view_grid(sim)
    mask = _view_mask(sim)
    g = sim.grid
    obs = np.zeros((N_CHANNELS, g, g), dtype=np.float64)

    # walls and obstacles, sampled at pixel centres
    xc, yc = np.meshgrid(vg.x_center, vg.y_center, indexing="ij")
    w = to_world_frame(state.pose, np.stack([xc, yc], axis=-1))
    room = state.room
    blocked = (w[..., 0] < 0) | (w[..., 0] > room.width) | (w[..., 1] < 0) | (w[..., 1] > room.height)
    for x0, y0, x1, y1 in room.obstacles:
        blocked |= (w[..., 0] > x0) & (w[..., 0] < x1) & (w[..., 1] > y0) & (w[..., 1] < y1)
    obs[CH_OBSTACLES] = blocked & mask
    obs[CH_FLOOR] = ~blocked & mask

    free = state.status == ObjectStatus.FREE
    if np.any(free):
        rel = to_robot_frame(state.pose, state.positions[free])
        vis = _in_view(sim, rel[:, 0], rel[:, 1])
        rel = rel[vis]
        if len(rel):
            r = room.object_radius
            dx = np.maximum(np.maximum(vg.x_lo[None, :] - rel[:, :1], 0.0), rel[:, :1] - vg.x_hi[None, :])
            dy = np.maximum(np.maximum(vg.y_lo[None, :] - rel[:, 1:], 0.0), rel[:, 1:] - vg.y_hi[None, :])
            d = np.sqrt(dx[:, :, None] ** 2 + dy[:, None, :] ** 2)
            obs[CH_OBJECTS] = np.clip(1.0 - d / r, 0.0, 1.0).max(axis=0) * mask
    return (np.round(obs * 255.0) / 255.0).astype(np.float32)


def crop_grasp(nav_obs: np.ndarray, sim: SimParams = DEFAULT_SIM) -> np.ndarray:
    """The grasp-region block of a navigation observation (works on batches)."""
    vg = view_grid(sim)
    return nav_obs[..., vg.row0:vg.row0 + vg.crop, vg.col0:vg.col0 + vg.crop]


def render_grasp_obs(state: WorldState) -> np.ndarray:
    return np.ascontiguousarray(crop_grasp(render_nav_obs(state), state.sim))


def cell_crop_block(cell, sim: SimParams = DEFAULT_SIM) -> Tuple[slice, slice]:
    """Crop rows/cols overlapped by a grasp cell (rows run far -> near)."""
    reg = sim.region
    i, j = reg.unflatten(cell)
    c = sim.crop
    # crop row r spans x in [x_hi - (r+1) px, x_hi - r px]
    fx0 = (reg.x_range[1] - (reg.x_range[0] + (i + 1) * reg.dx)) / (reg.x_range[1] - reg.x_range[0]) * c
    fx1 = (reg.x_range[1] - (reg.x_range[0] + i * reg.dx)) / (reg.x_range[1] - reg.x_range[0]) * c
    fy0 = (reg.y_range[1] - (reg.y_range[0] + (j + 1) * reg.dy)) / (reg.y_range[1] - reg.y_range[0]) * c
    fy1 = (reg.y_range[1] - (reg.y_range[0] + j * reg.dy)) / (reg.y_range[1] - reg.y_range[0]) * c
    return (slice(int(math.floor(fx0 + 1e-9)), int(math.ceil(fx1 - 1e-9))),
            slice(int(math.floor(fy0 + 1e-9)), int(math.ceil(fy1 - 1e-9))))


def pixel_to_robot(row: float, col: float, sim: SimParams = DEFAULT_SIM) -> Tuple[float, float]:
    """Exact inverse of the raster for (possibly fractional) pixel coordinates.

    Integer coordinates address pixel centres.
    """
    vg = view_grid(sim)
    xs = np.concatenate([vg.x_hi[:1], vg.x_center, vg.x_lo[-1:]])
    ys = np.concatenate([vg.y_hi[:1], vg.y_center, vg.y_lo[-1:]])
    idx = np.concatenate([[-0.5], np.arange(sim.grid, dtype=float), [sim.grid - 0.5]])
    return float(np.interp(row, idx, xs)), float(np.interp(col, idx, ys))


def single_object_world(seed, room: RoomSpec = RoomSpec(object_count=1),
                        sim: SimParams = DEFAULT_SIM) -> WorldState:
    """Stationary-curriculum world: one object somewhere in the grasp region."""
    gen = seed if isinstance(seed, np.random.Generator) else rngmod.stream(int(seed), "world")
    cx, cy = room.width / 2, room.height / 2
    heading = wrap_angle(float(gen.uniform(-math.pi, math.pi)))
    state = WorldState(room=room, pose=Pose(cx, cy, heading),
                       positions=np.zeros((1, 2)), status=np.array([ObjectStatus.HELD], dtype=np.int8),
                       rng_state=rngmod.get_state(gen), sim=sim)
    state = drop_in_region(state, gen)
    return replace(state, rng_state=rngmod.get_state(gen))


def object_in_region(state: WorldState) -> bool:
    free = np.flatnonzero(state.status == ObjectStatus.FREE)
    if free.size == 0:
        return False
    rel = to_robot_frame(state.pose, state.positions[free])
    reg = state.sim.region
    return bool(np.any((rel[:, 0] >= reg.x_range[0]) & (rel[:, 0] <= reg.x_range[1])
                       & (rel[:, 1] >= reg.y_range[0]) & (rel[:, 1] <= reg.y_range[1])))


def recenter_if_stuck(state: WorldState) -> WorldState:
    """Stationary phase: put a free object that left the grasp region back into it."""
    if state.holding or object_in_region(state) or state.count(ObjectStatus.FREE) == 0:
        return state
    gen = rngmod.from_state(state.rng_state)
    k = int(np.flatnonzero(state.status == ObjectStatus.FREE)[0])
    held = state.copy()
    held.status[k] = ObjectStatus.HELD
    out = drop_in_region(held, gen)
    return replace(out, rng_state=rngmod.get_state(gen))
