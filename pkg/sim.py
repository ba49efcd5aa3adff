"""
Quasi-static manipulation simulator.

A kinematic 7-DoF arm tracks end-effector targets with damped least-squares IK. Three
task scenes (button press, block tumble, door open) resolve contact with penalty springs
and static force/moment balance instead of integrating full rigid-body dynamics.
"""

import copy
import csv
import enum
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, ClassVar, Optional, Union

import numpy as np
from scipy.spatial.transform import Rotation

from common import make_rng
from controllers import Command, GripperAction, clamp_norm
from geom import (
    apply_delta_rotation,
    quaternion_xyzw,
    rot_x,
    rot_y,
    rot_z,
    rotation_angle_between,
)

logger = logging.getLogger(__name__)

# Franka-like arm, modified DH (Craig) convention; the last row is the flange.
DH_A = np.array([0.0, 0.0, 0.0, 0.0825, -0.0825, 0.0, 0.088, 0.0])
DH_D = np.array([0.333, 0.0, 0.316, 0.0, 0.384, 0.0, 0.0, 0.107])
DH_ALPHA = np.array([0.0, -np.pi / 2, np.pi / 2, np.pi / 2, -np.pi / 2, np.pi / 2, np.pi / 2, 0.0])
TCP_OFFSET = 0.1034
JOINT_LIMITS = np.array([2.8973, 1.7628, 2.8973, 3.0718, 2.8973, 3.7525, 2.8973])
HOME_Q = np.array([0.0, -np.pi / 4, 0.0, -3 * np.pi / 4, 0.0, np.pi / 2, np.pi / 4])
SHOULDER = np.array([0.0, 0.0, 0.333])
REACH = 0.9
MAX_GRIPPER_WIDTH = 0.08

GRAVITY = 9.81
FINGER_RADIUS = 0.005
CONTACT_MARGIN = 0.005
MAX_SUBSTEP_TRANSLATION = 0.02

BUTTON_TRAVEL = 0.12
BUTTON_PROTRUSION = BUTTON_TRAVEL + 0.01
BUTTON_SPRING = 20.0
BUTTON_PRELOAD = 1.0
BUTTON_RETURN_STEP = 0.01
BUTTON_SUCCESS = 0.1
CAP_ENTRY_TOLERANCE = 0.025

BLOCK_MASS = 0.25
BLOCK_EDGE_RANGE = (0.07, 0.16)
BLOCK_TILT_STEP = 0.05
BLOCK_SUCCESS = 0.1

HANDLE_MAX = np.pi / 2
HANDLE_UNLOCK = 1.22
HANDLE_RETURN_STEP = 0.04
DOOR_MAX = 1.2
DOOR_SUCCESS = 0.436
DOOR_WIDTH = 0.5
DOOR_HEIGHT = 0.8
DOOR_THICKNESS = 0.04
DOOR_HINGE_Y = 0.35
HANDLE_STANDOFF = 0.05
GRASP_RADIUS = 0.03
GRASP_ALIGNMENT = 0.35
DOOR_KEYPOINT_FRACTIONS = (0.15, 0.5, 0.75, 0.95)
DOOR_DISTANCE_FRACTION = 0.75


class SimulationError(RuntimeError):
    pass


class JointLimitError(ValueError):
    pass


class UnreachableTargetError(RuntimeError):
    def __init__(self, closest_distance: float):
        super().__init__(f"target outside workspace by {closest_distance:.4f} m")
        self.closest_distance = closest_distance


class TaskFamily(str, enum.Enum):
    BUTTON = "button"
    BLOCK = "block"
    DOOR = "door"


KEYPOINT_COUNTS = {TaskFamily.BUTTON: 2, TaskFamily.BLOCK: 10, TaskFamily.DOOR: 4}


@dataclass(frozen=True)
class SimConfig:
    substeps: int = 5
    dt: float = 0.02
    horizon: int = 120
    contact_stiffness: float = 1000.0
    admittance_stiffness: float = 1000.0
    strict_literal_reward: bool = False
    use_pid: bool = False
    ik_damping: float = 0.05
    ik_iterations: int = 20
    reset_jitter: float = 0.05

    def __post_init__(self):
        if self.substeps < 1 or self.horizon < 1:
            raise SimulationError("substeps and horizon must be >= 1")
        if min(self.dt, self.contact_stiffness, self.admittance_stiffness) <= 0:
            raise SimulationError("dt and stiffnesses must be positive")


# ---------------------------------------------------------------------------
# arm kinematics


def _link(i: int, theta: float) -> np.ndarray:
    ca, sa = np.cos(DH_ALPHA[i]), np.sin(DH_ALPHA[i])
    ct, st = np.cos(theta), np.sin(theta)
    return np.array(
        [
            [ct, -st, 0.0, DH_A[i]],
            [st * ca, ct * ca, -sa, -DH_D[i] * sa],
            [st * sa, ct * sa, ca, DH_D[i] * ca],
            [0.0, 0.0, 0.0, 1.0],
        ]
    )


def _tcp() -> np.ndarray:
    T = np.eye(4)
    T[:3, :3] = rot_z(-np.pi / 4)
    T[2, 3] = TCP_OFFSET
    return T


_TCP = _tcp()


def _check_joints(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (7,):
        raise JointLimitError(f"expected 7 joint values, got shape {q.shape}")
    over = np.abs(q) > JOINT_LIMITS + 1e-9
    if np.any(over):
        raise JointLimitError(f"joints {np.flatnonzero(over).tolist()} outside limits")
    return q


def _chain(q: np.ndarray):
    T = np.eye(4)
    axes, origins = [], []
    for i in range(7):
        T = T @ _link(i, q[i])
        axes.append(T[:3, 2].copy())
        origins.append(T[:3, 3].copy())
    T = T @ _link(7, 0.0) @ _TCP
    return T, axes, origins


def fk(q) -> tuple[np.ndarray, np.ndarray]:
    """
    End-effector (TCP) position and rotation for joint vector q.
    """
    T, _, _ = _chain(_check_joints(q))
    return T[:3, 3].copy(), T[:3, :3].copy()


def _geometric_jacobian(T: np.ndarray, axes, origins) -> np.ndarray:
    J = np.zeros((6, 7))
    for i, (z, o) in enumerate(zip(axes, origins)):
        J[:3, i] = np.cross(z, T[:3, 3] - o)
        J[3:, i] = z
    return J


def jacobian(q) -> np.ndarray:
    """
    6x7 geometric Jacobian of the TCP (linear rows first).
    """
    return _geometric_jacobian(*_chain(_check_joints(q)))


@dataclass(frozen=True, eq=False)
class IkResult:
    q: np.ndarray
    converged: bool
    position_error: float
    rotation_error: float


def ik_track(
    q,
    target_position,
    target_rotation,
    damping: float = 0.05,
    iterations: int = 20,
    position_tol: float = 1e-4,
    rotation_tol: float = 1e-3,
) -> IkResult:
    """
    Damped least-squares tracking of a nearby target pose.

    Raises UnreachableTargetError if the target lies outside the arm's workspace.
    """
    target_position = np.asarray(target_position, dtype=np.float64)
    target_rotation = np.asarray(target_rotation, dtype=np.float64)
    dist = float(np.linalg.norm(target_position - SHOULDER))
    if dist > REACH:
        raise UnreachableTargetError(dist - REACH)

    q = _check_joints(q).copy()
    lam2 = damping**2
    e_p = e_r = np.zeros(3)
    for it in range(iterations + 1):
        T, axes, origins = _chain(q)
        e_p = target_position - T[:3, 3]
        e_r = Rotation.from_matrix(target_rotation @ T[:3, :3].T).as_rotvec()
        if np.linalg.norm(e_p) < position_tol and np.linalg.norm(e_r) < rotation_tol:
            return IkResult(q, True, float(np.linalg.norm(e_p)), float(np.linalg.norm(e_r)))
        if it == iterations:
            break
        J = _geometric_jacobian(T, axes, origins)
        e = np.concatenate([e_p, e_r])
        dq = J.T @ np.linalg.solve(J @ J.T + lam2 * np.eye(6), e)
        q = np.clip(q + dq, -JOINT_LIMITS, JOINT_LIMITS)
    return IkResult(q, False, float(np.linalg.norm(e_p)), float(np.linalg.norm(e_r)))


@dataclass(frozen=True, eq=False)
class EEState:
    position: np.ndarray
    rotation: np.ndarray
    contact_force: np.ndarray
    gripper_width: float
    q: np.ndarray


def ee_from_joints(q, gripper_width: float = MAX_GRIPPER_WIDTH, contact_force=None) -> EEState:
    q = _check_joints(q)
    position, rotation = fk(q)
    if contact_force is None:
        contact_force = np.zeros(3)
    return EEState(position, rotation, np.asarray(contact_force, dtype=np.float64), float(gripper_width), q.copy())


# ---------------------------------------------------------------------------
# scenes


@dataclass(frozen=True, eq=False)
class Primitive:
    """
    Analytic render/contact primitive. Boxes use `half_extents` directly; cylinders
    are aligned with the local z axis with half_extents = (radius, radius, half_height).
    """

    object_id: int
    name: str
    shape: str
    rotation: np.ndarray
    center: np.ndarray
    half_extents: np.ndarray
    albedo: np.ndarray


@dataclass(frozen=True)
class ProgressState:
    """
    Task progress snapshot used by the reward: `distance` is the EE distance to the task
    point, `joint` the task joint (button travel, block angle to target, handle angle),
    `hinge` the door angle.
    """

    family: TaskFamily
    distance: float
    joint: float
    hinge: float = 0.0
    success: bool = False


def box_contact(center, rotation, half, x) -> tuple[float, np.ndarray, np.ndarray]:
    """
    Signed distance of point x to an oriented box, the outward normal at the closest
    surface point and that point (all world frame).
    """
    local = rotation.T @ (np.asarray(x) - center)
    clamped = np.clip(local, -half, half)
    diff = local - clamped
    dist = float(np.linalg.norm(diff))
    if dist > 0:
        normal = diff / dist
        return dist, rotation @ normal, rotation @ clamped + center
    depth = half - np.abs(local)
    k = int(np.argmin(depth))
    sign = 1.0 if local[k] >= 0 else -1.0
    normal = np.zeros(3)
    normal[k] = sign
    surface = local.copy()
    surface[k] = sign * half[k]
    return -float(depth[k]), rotation @ normal, rotation @ surface + center


def _floor_contact(x: np.ndarray, stiffness: float) -> tuple[np.ndarray, np.ndarray]:
    if x[2] >= 0.0:
        return x, np.zeros(3)
    pen = -x[2]
    x = x.copy()
    x[2] = 0.0
    return x, np.array([0.0, 0.0, stiffness * pen])


def _random_albedo(rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(0.2, 0.9, size=3)


class SceneModel:
    """
    Base class for task scenes. A scene owns its object poses and joint states and is
    mutated in place by `resolve_contact`; use `copy()` for snapshots.
    """

    family: ClassVar[TaskFamily]

    def copy(self) -> "SceneModel":
        return copy.deepcopy(self)

    def primitives(self) -> list[Primitive]:
        raise NotImplementedError

    def focus_rotation(self) -> np.ndarray:
        raise NotImplementedError

    def semantic_keypoints(self) -> list[np.ndarray]:
        raise NotImplementedError

    def task_observation(self) -> np.ndarray:
        raise NotImplementedError

    def progress(self, ee: EEState) -> ProgressState:
        raise NotImplementedError

    def is_success(self) -> bool:
        raise NotImplementedError

    def resolve_contact(
        self, ee: EEState, x_des: np.ndarray, rotation: np.ndarray, command: Command, config: SimConfig
    ) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def gripper_width_after(self, ee: EEState, command: Command) -> float:
        if command.gripper is GripperAction.OPEN:
            return MAX_GRIPPER_WIDTH
        if command.gripper is GripperAction.CLOSE:
            return 0.0
        return ee.gripper_width

    def variation_record(self) -> dict:
        return {}


@dataclass(eq=False)
class ButtonScene(SceneModel):
    family: ClassVar[TaskFamily] = TaskFamily.BUTTON

    box_center: np.ndarray
    box_half: np.ndarray
    box_yaw: float
    button_xy: np.ndarray
    button_radius: float
    box_albedo: np.ndarray
    button_albedo: np.ndarray
    j: float = 0.0

    @property
    def box_rotation(self) -> np.ndarray:
        return rot_z(self.box_yaw)

    @property
    def box_top(self) -> float:
        return float(self.box_center[2] + self.box_half[2])

    def cap_height(self) -> float:
        return self.box_top + BUTTON_PROTRUSION - self.j

    def cap_center(self) -> np.ndarray:
        return np.array([self.button_xy[0], self.button_xy[1], self.cap_height()])

    def primitives(self) -> list[Primitive]:
        half_height = (self.cap_height() - self.box_top) / 2.0
        return [
            Primitive(0, "box", "box", self.box_rotation, self.box_center.copy(), self.box_half.copy(), self.box_albedo),
            Primitive(
                1,
                "button",
                "cylinder",
                np.eye(3),
                np.array([self.button_xy[0], self.button_xy[1], self.box_top + half_height]),
                np.array([self.button_radius, self.button_radius, half_height]),
                self.button_albedo,
            ),
        ]

    def focus_rotation(self) -> np.ndarray:
        return self.box_rotation

    def semantic_keypoints(self) -> list[np.ndarray]:
        top = np.array([self.box_center[0], self.box_center[1], self.box_top])
        offset = np.array([self.button_xy[0], self.button_xy[1], self.box_top]) - top
        # the second keypoint mirrors the button across the top-face center
        return [self.cap_center(), top - offset]

    def task_observation(self) -> np.ndarray:
        return np.concatenate([self.box_center, self.cap_center(), [self.j]])

    def progress(self, ee: EEState) -> ProgressState:
        d = float(np.linalg.norm(ee.position - self.cap_center()))
        return ProgressState(self.family, d, self.j, 0.0, self.is_success())

    def is_success(self) -> bool:
        return self.j > BUTTON_SUCCESS

    def variation_record(self) -> dict:
        return {
            "box_center": self.box_center.tolist(),
            "box_half": self.box_half.tolist(),
            "box_yaw": float(self.box_yaw),
            "button_xy": self.button_xy.tolist(),
            "button_radius": float(self.button_radius),
        }

    def resolve_contact(self, ee, x_des, rotation, command, config):
        k_c = config.contact_stiffness
        x = np.array(x_des, dtype=np.float64)
        force = np.zeros(3)
        z_cap = self.cap_height()
        radial = x[:2] - self.button_xy
        horiz = float(np.linalg.norm(radial))
        reach = self.button_radius + FINGER_RADIUS
        pressing = False
        if horiz <= reach and x[2] < z_cap:
            if ee.position[2] >= z_cap - CAP_ENTRY_TOLERANCE:
                pressing = True
                push = k_c * (z_cap - x[2])
                if push > BUTTON_SPRING * self.j + BUTTON_PRELOAD:
                    z_rest = self.box_top + BUTTON_PROTRUSION
                    j_eq = (k_c * (z_rest - x[2]) - BUTTON_PRELOAD) / (k_c + BUTTON_SPRING)
                    self.j = float(np.clip(max(j_eq, self.j), 0.0, BUTTON_TRAVEL))
                z_cap = self.cap_height()
                pen = max(0.0, z_cap - x[2])
                if self.j < BUTTON_TRAVEL:
                    pen = min(pen, (BUTTON_SPRING * self.j + BUTTON_PRELOAD) / k_c)
                x[2] = z_cap - pen
                force += np.array([0.0, 0.0, k_c * pen])
            elif x[2] > self.box_top:
                direction = radial / horiz if horiz > 1e-9 else np.array([1.0, 0.0])
                pen = reach - horiz
                x[:2] = self.button_xy + direction * reach
                force[:2] += k_c * pen * direction
        if not pressing:
            self.j = max(0.0, self.j - BUTTON_RETURN_STEP)

        sd, normal, surface = box_contact(self.box_center, self.box_rotation, self.box_half, x)
        if sd < 0:
            x = surface
            force += k_c * (-sd) * normal
        x, f_floor = _floor_contact(x, k_c)
        return x, force + f_floor


@dataclass(eq=False)
class BlockScene(SceneModel):
    family: ClassVar[TaskFamily] = TaskFamily.BLOCK

    center: np.ndarray
    edge: float
    albedo: np.ndarray
    mass: float = BLOCK_MASS
    base_rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    target_rotation: np.ndarray = field(default_factory=lambda: rot_y(np.pi / 2))
    tilt: float = 0.0
    pivot: Optional[np.ndarray] = None
    tilt_axis: Optional[np.ndarray] = None

    @property
    def half(self) -> float:
        return self.edge / 2.0

    def _tilt_rotation(self, angle: float) -> np.ndarray:
        return Rotation.from_rotvec(angle * self.tilt_axis).as_matrix()

    def pose(self) -> tuple[np.ndarray, np.ndarray]:
        if self.tilt <= 0.0 or self.pivot is None:
            return self.center.copy(), self.base_rotation.copy()
        R_t = self._tilt_rotation(self.tilt)
        return self.pivot + R_t @ (self.center - self.pivot), R_t @ self.base_rotation

    def rotation(self) -> np.ndarray:
        return self.pose()[1]

    def angle_to_target(self) -> float:
        return rotation_angle_between(self.target_rotation, self.rotation())

    def body_point(self, local) -> np.ndarray:
        c, R = self.pose()
        return c + R @ np.asarray(local, dtype=np.float64)

    def primitives(self) -> list[Primitive]:
        c, R = self.pose()
        return [Primitive(0, "block", "box", R, c, np.full(3, self.half), self.albedo)]

    def focus_rotation(self) -> np.ndarray:
        return self.rotation()

    def semantic_keypoints(self) -> list[np.ndarray]:
        h = self.half
        out = []
        for fx in (-0.8, -0.4, 0.0, 0.4, 0.8):
            for fy in (0.5, -0.5):
                out.append(self.body_point([fx * h, fy * h, h]))
        return out

    def task_observation(self) -> np.ndarray:
        c, R = self.pose()
        return np.concatenate([c, quaternion_xyzw(R), np.full(3, self.edge)])

    def progress(self, ee: EEState) -> ProgressState:
        d = float(np.linalg.norm(ee.position - self.body_point([0.0, 0.0, self.half])))
        return ProgressState(self.family, d, self.angle_to_target(), 0.0, self.is_success())

    def is_success(self) -> bool:
        return self.angle_to_target() < BLOCK_SUCCESS

    def variation_record(self) -> dict:
        return {"center": self.center.tolist(), "edge": float(self.edge), "mass": float(self.mass)}

    def _edges(self):
        cx, cy, cz = self.center
        h = self.half
        z = cz - h
        return [
            (np.array([cx + h, cy, z]), np.array([0.0, 1.0, 0.0])),
            (np.array([cx - h, cy, z]), np.array([0.0, -1.0, 0.0])),
            (np.array([cx, cy + h, z]), np.array([-1.0, 0.0, 0.0])),
            (np.array([cx, cy - h, z]), np.array([1.0, 0.0, 0.0])),
        ]

    def _gravity_moment(self, pivot, axis, com) -> float:
        return float(axis @ np.cross(com - pivot, np.array([0.0, 0.0, -self.mass * GRAVITY])))

    def resolve_contact(self, ee, x_des, rotation, command, config):
        k_c = config.contact_stiffness
        c, R = self.pose()
        half = np.full(3, self.half)
        x = np.array(x_des, dtype=np.float64)
        force = np.zeros(3)

        sticking = bool(np.any(command.force))
        if sticking:
            # tangential motion is held by friction; only the normal component moves the EE
            sd_prev, n_prev, _ = box_contact(c, R, half, ee.position)
            if sd_prev < CONTACT_MARGIN:
                delta = x - ee.position
                x = ee.position + float(delta @ n_prev) * n_prev

        sd, normal, surface = box_contact(c, R, half, x)
        in_contact = sd < CONTACT_MARGIN
        applied = np.zeros(3)
        contact_point = surface
        if in_contact:
            if sd < 0:
                x = surface.copy()
                force = k_c * (-sd) * normal
            push = -force.copy()
            push[2] = 0.0
            applied = push + (command.force if sticking else 0.0)

        d_tilt = 0.0
        if self.tilt > 0.0:
            m_app = float(self.tilt_axis @ np.cross(contact_point - self.pivot, applied)) if in_contact else 0.0
            m_grav = self._gravity_moment(self.pivot, self.tilt_axis, c)
            if self.tilt >= np.pi / 4 or m_app + m_grav > 0:
                d_tilt = BLOCK_TILT_STEP
            elif m_app > 0:
                d_tilt = 0.0
            else:
                d_tilt = -min(BLOCK_TILT_STEP, self.tilt)
        elif in_contact and np.any(applied):
            best = None
            for pivot, axis in self._edges():
                m_app = float(axis @ np.cross(contact_point - pivot, applied))
                if best is None or m_app > best[0]:
                    best = (m_app, pivot, axis)
            m_app, pivot, axis = best
            if m_app + self._gravity_moment(pivot, axis, c) > 0:
                self.pivot, self.tilt_axis = pivot, axis
                d_tilt = BLOCK_TILT_STEP

        if d_tilt != 0.0:
            new_tilt = float(np.clip(self.tilt + d_tilt, 0.0, np.pi / 2))
            step = new_tilt - self.tilt
            if in_contact and sticking:
                x = self.pivot + self._tilt_rotation(step) @ (x - self.pivot)
            self.tilt = new_tilt
            if self.tilt >= np.pi / 2 - 1e-12:
                self.center, self.base_rotation = self.pose()
                self.tilt, self.pivot, self.tilt_axis = 0.0, None, None
            elif self.tilt <= 0.0:
                self.tilt, self.pivot, self.tilt_axis = 0.0, None, None

        x, f_floor = _floor_contact(x, k_c)
        return x, force + f_floor


_HANDLE_BASE = np.column_stack([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
# maps a cylinder's local z onto the lever (handle x) axis
_Z_TO_X = np.column_stack([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])


@dataclass(eq=False)
class DoorScene(SceneModel):
    """
    Hinged door with a lever handle. The handle frame has x along the lever, y along the
    door's inward normal (away from the robot) and z up when the handle is at rest.
    """

    family: ClassVar[TaskFamily] = TaskFamily.DOOR

    door_x: float
    pivot_y: float
    pivot_z: float
    lever_length: float
    lever_thickness: float
    lever_shape: str
    door_albedo: np.ndarray
    handle_albedo: np.ndarray
    theta: float = 0.0
    phi: float = 0.0
    attached: bool = False
    grasp_offset: Optional[np.ndarray] = None

    @property
    def hinge(self) -> np.ndarray:
        return np.array([self.door_x, DOOR_HINGE_Y, self.pivot_z])

    def door_rotation(self, phi: Optional[float] = None) -> np.ndarray:
        return rot_z(-(self.phi if phi is None else phi))

    def pivot_world(self, phi: Optional[float] = None) -> np.ndarray:
        rest = np.array([self.door_x - DOOR_THICKNESS / 2 - HANDLE_STANDOFF, self.pivot_y, self.pivot_z])
        return self.hinge + self.door_rotation(phi) @ (rest - self.hinge)

    def handle_rotation(self, theta: Optional[float] = None, phi: Optional[float] = None) -> np.ndarray:
        theta = self.theta if theta is None else theta
        return self.door_rotation(phi) @ rot_x(theta) @ _HANDLE_BASE

    def lever_point(self, fraction: float, theta=None, phi=None) -> np.ndarray:
        return self.pivot_world(phi) + self.handle_rotation(theta, phi) @ np.array(
            [fraction * self.lever_length, 0.0, 0.0]
        )

    def _slab(self):
        R = self.door_rotation()
        rest = np.array([self.door_x, DOOR_HINGE_Y - DOOR_WIDTH / 2, 0.05 + DOOR_HEIGHT / 2])
        center = self.hinge + R @ (rest - self.hinge)
        return center, R, np.array([DOOR_THICKNESS / 2, DOOR_WIDTH / 2, DOOR_HEIGHT / 2])

    def _lever_box(self):
        R = self.handle_rotation()
        half = np.array([self.lever_length / 2, self.lever_thickness / 2, self.lever_thickness / 2])
        return self.lever_point(0.5), R, half

    def primitives(self) -> list[Primitive]:
        slab_c, slab_R, slab_h = self._slab()
        R_door = self.door_rotation()
        pivot = self.pivot_world()
        standoff_c = pivot + R_door @ np.array([(HANDLE_STANDOFF + DOOR_THICKNESS / 2) / 2, 0.0, 0.0])
        prims = [
            Primitive(0, "door", "box", slab_R, slab_c, slab_h, self.door_albedo),
            Primitive(
                1,
                "handle_base",
                "cylinder",
                R_door @ _Z_TO_X,
                standoff_c,
                np.array([0.008, 0.008, (HANDLE_STANDOFF + DOOR_THICKNESS / 2) / 2]),
                self.handle_albedo * 0.8,
            ),
        ]
        lever_c, lever_R, lever_h = self._lever_box()
        if self.lever_shape == "cylinder":
            r = self.lever_thickness / 2
            prims.append(
                Primitive(2, "lever", "cylinder", lever_R @ _Z_TO_X, lever_c, np.array([r, r, self.lever_length / 2]), self.handle_albedo)
            )
        else:
            prims.append(Primitive(2, "lever", "box", lever_R, lever_c, lever_h, self.handle_albedo))
        return prims

    def focus_rotation(self) -> np.ndarray:
        return self.handle_rotation()

    def semantic_keypoints(self) -> list[np.ndarray]:
        return [self.lever_point(s) for s in DOOR_KEYPOINT_FRACTIONS]

    def task_observation(self) -> np.ndarray:
        return np.concatenate([self.pivot_world(), [self.phi]])

    def progress(self, ee: EEState) -> ProgressState:
        d = float(np.linalg.norm(ee.position - self.lever_point(DOOR_DISTANCE_FRACTION)))
        return ProgressState(self.family, d, self.theta, self.phi, self.is_success())

    def is_success(self) -> bool:
        return self.phi > DOOR_SUCCESS

    def variation_record(self) -> dict:
        return {
            "door_x": float(self.door_x),
            "pivot_y": float(self.pivot_y),
            "pivot_z": float(self.pivot_z),
            "lever_length": float(self.lever_length),
            "lever_thickness": float(self.lever_thickness),
            "lever_shape": self.lever_shape,
        }

    def lever_distance(self, x: np.ndarray) -> float:
        a = self.pivot_world()
        b = self.lever_point(1.0)
        ab = b - a
        t = float(np.clip((x - a) @ ab / (ab @ ab), 0.0, 1.0))
        return float(np.linalg.norm(x - (a + t * ab)))

    def gripper_width_after(self, ee, command):
        if command.gripper is GripperAction.CLOSE and self.attached:
            return self.lever_thickness
        return super().gripper_width_after(ee, command)

    def _grasp_point(self, theta: float, phi: float) -> np.ndarray:
        return self.pivot_world(phi) + self.handle_rotation(theta, phi) @ self.grasp_offset

    def _solve_joint(self, target, theta, phi, which: str, damping=1e-2, eps=1e-6):
        g = self._grasp_point(theta, phi)
        if which == "theta":
            J = (self._grasp_point(theta + eps, phi) - self._grasp_point(theta - eps, phi)) / (2 * eps)
        else:
            J = (self._grasp_point(theta, phi + eps) - self._grasp_point(theta, phi - eps)) / (2 * eps)
        return float(J @ (target - g) / (J @ J + damping**2))

    def resolve_contact(self, ee, x_des, rotation, command, config):
        k_c = config.contact_stiffness
        x = np.array(x_des, dtype=np.float64)

        if command.gripper is GripperAction.OPEN and self.attached:
            self.attached, self.grasp_offset = False, None
            logger.debug("handle released")
        elif command.gripper is GripperAction.CLOSE and not self.attached:
            lever_dir = self.handle_rotation()[:, 0]
            aligned = abs(float(rotation[:, 1] @ lever_dir)) <= GRASP_ALIGNMENT
            if aligned and ee.gripper_width > self.lever_thickness and self.lever_distance(ee.position) <= GRASP_RADIUS:
                self.attached = True
                self.grasp_offset = self.handle_rotation().T @ (ee.position - self.pivot_world())
                logger.debug("handle grasped")

        if self.attached:
            theta = float(np.clip(self.theta + self._solve_joint(x, self.theta, self.phi, "theta"), 0.0, HANDLE_MAX))
            phi = self.phi
            if theta > HANDLE_UNLOCK:
                phi = float(np.clip(phi + self._solve_joint(x, theta, phi, "phi"), 0.0, DOOR_MAX))
            self.theta, self.phi = theta, phi
            g = self._grasp_point(theta, phi)
            return g, k_c * (g - x)

        self.theta = max(0.0, self.theta - HANDLE_RETURN_STEP)
        force = np.zeros(3)
        for center, R, half in (self._slab(), self._lever_box()):
            sd, normal, surface = box_contact(center, R, half, x)
            if sd < 0:
                x = surface
                force += k_c * (-sd) * normal
        x, f_floor = _floor_contact(x, k_c)
        return x, force + f_floor


# ---------------------------------------------------------------------------
# variations, observations, rewards


def sample_variation(family: Union[TaskFamily, str], rng: np.random.Generator) -> SceneModel:
    family = TaskFamily(family)
    if family is TaskFamily.BUTTON:
        half = np.array([rng.uniform(0.06, 0.1), rng.uniform(0.06, 0.1), rng.uniform(0.03, 0.07)])
        center = np.array([rng.uniform(0.45, 0.6), rng.uniform(-0.1, 0.1), half[2]])
        yaw = rng.uniform(-np.pi / 6, np.pi / 6)
        radius = rng.uniform(0.012, 0.02)
        r_off = rng.uniform(0.02, min(half[0], half[1]) - radius - 0.005)
        ang = rng.uniform(0.0, 2 * np.pi)
        local = rot_z(yaw) @ np.array([r_off * np.cos(ang), r_off * np.sin(ang), 0.0])
        # clamp the button inside the (rotated) top face
        local_box = rot_z(yaw).T @ local
        local_box[:2] = np.clip(local_box[:2], -(half[:2] - radius - 0.005), half[:2] - radius - 0.005)
        local = rot_z(yaw) @ local_box
        return ButtonScene(
            box_center=center,
            box_half=half,
            box_yaw=float(yaw),
            button_xy=center[:2] + local[:2],
            button_radius=float(radius),
            box_albedo=_random_albedo(rng),
            button_albedo=_random_albedo(rng),
        )
    if family is TaskFamily.BLOCK:
        edge = float(rng.uniform(*BLOCK_EDGE_RANGE))
        center = np.array([rng.uniform(0.45, 0.6), rng.uniform(-0.1, 0.1), edge / 2])
        return BlockScene(center=center, edge=edge, albedo=_random_albedo(rng))
    return DoorScene(
        door_x=float(rng.uniform(0.65, 0.75)),
        pivot_y=float(rng.uniform(0.02, 0.08)),
        pivot_z=float(rng.uniform(0.3, 0.45)),
        lever_length=float(rng.uniform(0.08, 0.14)),
        lever_thickness=float(rng.uniform(0.015, 0.025)),
        lever_shape=str(rng.choice(["cuboid", "cylinder"])),
        door_albedo=_random_albedo(rng),
        handle_albedo=_random_albedo(rng),
    )


def semantic_keypoints(scene: SceneModel) -> list[np.ndarray]:
    return scene.semantic_keypoints()


def observe(scene: SceneModel, ee: EEState) -> np.ndarray:
    return np.concatenate(
        [
            ee.q,
            [ee.gripper_width],
            ee.position,
            quaternion_xyzw(ee.rotation),
            ee.contact_force,
            scene.task_observation(),
        ]
    )


OBSERVATION_SIZES = {TaskFamily.BUTTON: 25, TaskFamily.BLOCK: 28, TaskFamily.DOOR: 22}


def check_success(family: Union[TaskFamily, str], scene: SceneModel) -> bool:
    if TaskFamily(family) is not scene.family:
        raise SimulationError(f"scene is {scene.family.value}, not {family}")
    return scene.is_success()


def reward_for(
    family: Union[TaskFamily, str], prev: ProgressState, cur: ProgressState, strict_literal: bool = False
) -> float:
    """
    Shaped reward between two consecutive progress states. By default every term is
    signed so that progress is positive; `strict_literal` applies the printed
    current-minus-previous signs to the distance and block-angle terms instead.
    """
    family = TaskFamily(family)
    if prev.family is not family or cur.family is not family:
        raise SimulationError(f"progress states for {prev.family}/{cur.family} passed to {family}")
    succ = 100.0 if cur.success else 0.0
    if strict_literal:
        d_term = 10.0 * (cur.distance - prev.distance)
    else:
        d_term = 10.0 * (prev.distance - cur.distance)
    if family is TaskFamily.BUTTON:
        return d_term + 10.0 * (cur.joint - prev.joint) + succ - 0.1
    if family is TaskFamily.BLOCK:
        if strict_literal:
            angle_term = 10.0 * (cur.joint - prev.joint)
        else:
            angle_term = 10.0 * (prev.joint - cur.joint)
        return d_term + angle_term + succ - 0.1
    return d_term + 10.0 * (cur.joint - prev.joint) + 100.0 * (cur.hinge - prev.hinge) + succ - 0.1 - 0.01


@dataclass(frozen=True, eq=False)
class StepResult:
    observation: np.ndarray
    reward: float
    done: bool
    success: bool
    info: dict
    ee: EEState


CommandSource = Union[Command, Callable[[EEState], Command]]


def _clamp_to_workspace(x: np.ndarray) -> np.ndarray:
    offset = x - SHOULDER
    dist = float(np.linalg.norm(offset))
    if dist <= REACH - 1e-6:
        return x
    return SHOULDER + offset * ((REACH - 1e-6) / dist)


def _substep(scene: SceneModel, ee: EEState, command: Command, config: SimConfig) -> EEState:
    delta = command.delta_translation + (command.force + ee.contact_force) / config.admittance_stiffness
    x_des = ee.position + clamp_norm(delta, MAX_SUBSTEP_TRANSLATION)
    if command.delta_rotation.angle != 0.0:
        R_des = apply_delta_rotation(command.delta_rotation, ee.rotation)
    else:
        R_des = ee.rotation
    width = scene.gripper_width_after(ee, command)
    x_res, f_c = scene.resolve_contact(ee, x_des, R_des, command, config)
    x_res = _clamp_to_workspace(x_res)
    ik = ik_track(ee.q, x_res, R_des, damping=config.ik_damping, iterations=config.ik_iterations)
    if not ik.converged:
        logger.warning("IK did not converge (%.2e m, %.2e rad)", ik.position_error, ik.rotation_error)
    position, rotation = fk(ik.q)
    return EEState(position, rotation, f_c, float(np.clip(width, 0.0, MAX_GRIPPER_WIDTH)), ik.q)


def step_env(
    scene: SceneModel, ee: EEState, command: CommandSource, substeps: int = 5, config: Optional[SimConfig] = None
) -> StepResult:
    """
    Execute one policy decision: `command` (a fixed Command or a callable producing one per
    substep from the current EE state) is applied for `substeps` simulator substeps.
    """
    config = config or SimConfig()
    if substeps < 1:
        raise SimulationError(f"substeps must be >= 1, got {substeps}")
    prev = scene.progress(ee)
    q0 = ee.q
    for _ in range(substeps):
        cmd = command(ee) if callable(command) else command
        ee = _substep(scene, ee, cmd, config)
    cur = scene.progress(ee)
    reward = reward_for(scene.family, prev, cur, config.strict_literal_reward)
    info = {
        "joint_delta": ee.q - q0,
        "distance": cur.distance,
        "task_joint": cur.joint,
        "hinge": cur.hinge,
    }
    return StepResult(observe(scene, ee), float(reward), cur.success, cur.success, info, ee)


TRACE_FIELDS = ["t"] + [f"q{i}" for i in range(7)] + ["x", "y", "z", "task_joint", "hinge", "reward", "action", "config_hash"]


class TaskEnv:
    """
    One episode state machine over a sampled scene variation.
    """

    def __init__(self, family: Union[TaskFamily, str], config: Optional[SimConfig] = None):
        self.family = TaskFamily(family)
        self.config = config or SimConfig()
        self.scene: Optional[SceneModel] = None
        self.ee: Optional[EEState] = None
        self.variation_seed: Optional[int] = None
        self.t = 0
        self.trace: list[dict] = []

    @property
    def observation_size(self) -> int:
        return OBSERVATION_SIZES[self.family]

    def reset(self, variation_seed: int) -> np.ndarray:
        self.variation_seed = int(variation_seed)
        self.scene = sample_variation(self.family, make_rng(variation_seed, "variation"))
        jitter = make_rng(variation_seed, "reset").uniform(-1.0, 1.0, size=7) * self.config.reset_jitter
        self.ee = ee_from_joints(HOME_Q + jitter)
        self.t = 0
        self.trace = []
        return observe(self.scene, self.ee)

    def observation(self) -> np.ndarray:
        return observe(self.scene, self.ee)

    def step(self, command: CommandSource, action: int = -1) -> StepResult:
        if self.scene is None:
            raise SimulationError("step() called before reset()")
        result = step_env(self.scene, self.ee, command, self.config.substeps, self.config)
        self.ee = result.ee
        self.t += 1
        truncated = self.t >= self.config.horizon
        done = result.success or truncated
        info = dict(result.info, truncated=truncated and not result.success, t=self.t)
        self.trace.append(
            dict(
                t=self.t,
                **{f"q{i}": float(v) for i, v in enumerate(self.ee.q)},
                x=float(self.ee.position[0]),
                y=float(self.ee.position[1]),
                z=float(self.ee.position[2]),
                task_joint=float(result.info["task_joint"]),
                hinge=float(result.info["hinge"]),
                reward=float(result.reward),
                action=int(action),
            )
        )
        return StepResult(result.observation, result.reward, done, result.success, info, result.ee)

    def write_trace(self, path: Union[str, Path], config_hash: str = "") -> Path:
        path = Path(path)
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=TRACE_FIELDS, lineterminator="\n")
            writer.writeheader()
            writer.writerows(dict(row, config_hash=config_hash) for row in self.trace)
        return path
