"""Comparison controllers: uniformly random, random navigation with a learned
grasp, and a scripted centroid follower.

All of them act on rendered observations only. Image coordinates follow the
usual contour-moment convention ``(u, v) = (column, row)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from . import world as W
from .world import CH_OBJECTS

# pixel (u, v) -> robot-frame (x, y) pairs measured on the real robot's camera
PAPER_PIXELS = np.array([[70., 84.], [45., 83.], [65., 83.], [67., 55.], [45., 56.],
                         [56., 56.], [68., 70.], [45., 70.], [56., 70.]])
PAPER_ROBOT = np.array([[0.30, -0.08], [0.30, 0.08], [0.30, 0.0], [0.47, -0.08], [0.47, 0.08],
                        [0.47, 0.0], [0.38, -0.08], [0.38, 0.08], [0.38, 0.0]])

# robot-frame calibration targets for the simulated camera: the same 3 x 3 layout
CALIBRATION_POINTS = PAPER_ROBOT.copy()

DETECT_THRESHOLD = 0.5
MAX_FORWARD = 0.1
MAX_TURN = math.pi / 12


class CalibrationError(ValueError):
    pass


def poly2_features(uv) -> np.ndarray:
    """[1, u, v, u^2, uv, v^2] per row."""
    uv = np.atleast_2d(np.asarray(uv, dtype=np.float64))
    u, v = uv[:, 0], uv[:, 1]
    return np.stack([np.ones_like(u), u, v, u * u, u * v, v * v], axis=1)


@dataclass(frozen=True)
class CalibrationSet:
    pixels: np.ndarray
    robot: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "pixels", np.asarray(self.pixels, dtype=np.float64).reshape(-1, 2))
        object.__setattr__(self, "robot", np.asarray(self.robot, dtype=np.float64).reshape(-1, 2))
        if len(self.pixels) != len(self.robot):
            raise CalibrationError("pixel and robot lists differ in length")


PAPER_CALIBRATION = CalibrationSet(PAPER_PIXELS, PAPER_ROBOT)


def fit_pixel_to_world(cal: CalibrationSet) -> np.ndarray:
    """(6, 2) coefficients of a least-squares quadratic map, no extra intercept."""
    if len(cal.pixels) < 6:
        raise CalibrationError("need at least 6 calibration pairs")
    X = poly2_features(cal.pixels)
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise CalibrationError("calibration pixels are degenerate (rank-deficient features)")
    coef, *_ = np.linalg.lstsq(X, cal.robot, rcond=None)
    return coef


def pixel_to_world(coef: np.ndarray, uv) -> np.ndarray:
    return poly2_features(uv) @ coef


def detect_centroids(obs: np.ndarray, threshold: float = DETECT_THRESHOLD) -> List[Tuple[float, float]]:
    """Centroids ``(u, v)`` of 8-connected blobs in the object channel."""
    channel = obs[CH_OBJECTS] if obs.ndim == 3 else obs
    labels, n = ndimage.label(channel > threshold, structure=np.ones((3, 3)))
    if n == 0:
        return []
    centres = ndimage.center_of_mass(np.ones_like(channel), labels, range(1, n + 1))
    return [(float(c), float(r)) for r, c in centres]


def sim_calibration(sim: W.SimParams = W.DEFAULT_SIM) -> CalibrationSet:
    """Pixel/robot pairs collected by rendering one object at each target point."""
    room = W.RoomSpec(object_count=1)
    pose = W.Pose(room.width / 2, room.height / 2, 0.0)
    pixels = []
    for x, y in CALIBRATION_POINTS:
        wx, wy = W.to_world_frame(pose, np.array([[x, y]]))[0]
        state = W.WorldState(room=room, pose=pose, positions=np.array([[wx, wy]]),
                             status=np.zeros(1, dtype=np.int8), rng_state={}, sim=sim)
        found = detect_centroids(W.render_nav_obs(state))
        if len(found) != 1:
            raise CalibrationError(f"calibration object at ({x}, {y}) not detected once")
        pixels.append(found[0])
    return CalibrationSet(np.array(pixels), CALIBRATION_POINTS)


Projector = Callable[[Sequence[Tuple[float, float]]], np.ndarray]


def calibrated_projector(cal: Optional[CalibrationSet] = None,
                         sim: W.SimParams = W.DEFAULT_SIM) -> Projector:
    coef = fit_pixel_to_world(cal if cal is not None else sim_calibration(sim))
    return lambda uvs: pixel_to_world(coef, uvs) if len(uvs) else np.zeros((0, 2))


def exact_projector(sim: W.SimParams = W.DEFAULT_SIM) -> Projector:
    """Analytic inverse of the renderer (test oracle)."""
    def project(uvs):
        return np.array([W.pixel_to_robot(v, u, sim) for u, v in uvs]).reshape(-1, 2)
    return project


def nav_toward(x: float, y: float) -> np.ndarray:
    """Forward and turn proportional to how far the target is, saturating."""
    radius = min(max(math.hypot(x, y), 0.0), MAX_FORWARD)
    theta = min(max(math.atan2(y, x), -MAX_TURN), MAX_TURN)
    return np.array([radius / MAX_FORWARD * 2.0 - 1.0, theta / MAX_TURN])


def scripted_nav(obs: np.ndarray, project: Projector, rng: np.random.Generator) -> np.ndarray:
    pts = project(detect_centroids(obs))
    if len(pts) == 0:
        return rng.uniform(-1.0, 1.0, size=2)
    x, y = min(pts, key=lambda p: p[0] ** 2 + p[1] ** 2)
    return np.clip(nav_toward(x, y), -1.0, 1.0)


def scripted_grasp(obs: np.ndarray, project: Projector,
                   region: W.GraspRegion = W.GRASP_REGION) -> Optional[int]:
    """Cell of the closest detected object inside the grasp region, else None."""
    pts = [p for p in project(detect_centroids(obs)) if region.contains(p[0], p[1])]
    if not pts:
        return None
    x, y = min(pts, key=lambda p: p[0] ** 2 + p[1] ** 2)
    return region.cell_of(x, y)


# ---------------------------------------------------------------------------
# controllers usable by evaluate()


class ScriptedPolicy:
    def __init__(self, sim: W.SimParams = W.DEFAULT_SIM, project: Optional[Projector] = None):
        self.sim = sim
        self.project = project or calibrated_projector(sim=sim)

    def nav_action(self, o, rng):
        return scripted_nav(o, self.project, rng)

    def grasp_action(self, o, rng):
        return scripted_grasp(o, self.project, self.sim.region)

    def execute(self, state, a):
        return W.attempt_grasp(state, a)


class RandAllPolicy:
    """Uniform moves; a uniformly random cell is tried at every step."""

    def __init__(self, sim: W.SimParams = W.DEFAULT_SIM):
        self.n = sim.region.n_actions

    def nav_action(self, o, rng):
        return rng.uniform(-1.0, 1.0, size=2)

    def grasp_action(self, o, rng):
        return int(rng.integers(self.n))

    def execute(self, state, a):
        return W.attempt_grasp(state, a)


class RandNavPolicy:
    """Uniform moves with a frozen learned grasp model deciding when and where."""

    def __init__(self, grasp_model, sim: W.SimParams = W.DEFAULT_SIM, gate_threshold: float = 0.5):
        if grasp_model is None:
            raise W.ConfigurationError("rand_nav needs a trained grasp model")
        self.grasp = grasp_model
        self.sim = sim
        self.threshold = gate_threshold

    def nav_action(self, o, rng):
        return rng.uniform(-1.0, 1.0, size=2)

    def grasp_action(self, o, rng):
        crop = W.crop_grasp(o, self.sim)
        if self.grasp.grasp_prob(crop) < self.threshold:
            return None
        return self.grasp.sample_action(crop, None, greedy=True)

    def execute(self, state, a):
        return self.grasp.execute(state, a)
