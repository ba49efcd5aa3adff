"""
Task-axes controllers: per-step end-effector commands from a controller spec and the
current end-effector state, plus prioritized null-space composition.
"""

import enum
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from geom import (
    AngleAxis,
    null_space_projector,
    project_onto_axis,
    rotation_between,
    unit,
)

logger = logging.getLogger(__name__)

DEFAULT_MAX_TRANSLATION = 0.01
DEFAULT_MAX_ROTATION = 0.05
CURL_ANGLE_STEP = 0.05
CONVERGED_DISTANCE = 1e-6
DEFAULT_DT = 0.02


class ControllerSpecError(ValueError):
    pass


class ControllerKind(enum.IntEnum):
    POSITION_ERROR_AXIS = 0
    POSITION_FIXED_AXIS = 1
    CURL_ATTRACTOR = 2
    FORCE = 3
    ROTATION = 4
    GRIPPER_OPEN = 5
    GRIPPER_CLOSE = 6

    @property
    def is_rotational(self) -> bool:
        return self is ControllerKind.ROTATION


class GripperAction(enum.Enum):
    OPEN = "open"
    CLOSE = "close"
    HOLD = "hold"


@dataclass(frozen=True)
class Gains:
    kp: float = 1.0
    kd: float = 0.1
    ki: float = 0.0

    def __post_init__(self):
        if not self.kp > 0:
            raise ControllerSpecError(f"kp must be positive, got {self.kp}")
        if self.kd < 0 or self.ki < 0:
            raise ControllerSpecError(f"kd and ki must be nonnegative, got {self.kd}, {self.ki}")


def _checked_axis(name: str, value) -> Optional[np.ndarray]:
    if value is None:
        return None
    v = np.asarray(value, dtype=np.float64).reshape(3)
    n = np.linalg.norm(v)
    if not np.isfinite(n) or abs(n - 1.0) > 1e-6:
        raise ControllerSpecError(f"{name} must be unit-norm, got norm {n}")
    return v / n


def _checked_point(name: str, value) -> Optional[np.ndarray]:
    if value is None:
        return None
    v = np.asarray(value, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(v)):
        raise ControllerSpecError(f"{name} must be finite, got {v}")
    return v


@dataclass(frozen=True, eq=False)
class ControllerSpec:
    """
    One task-axes controller. Which fields are required depends on `kind`:

    - position kinds need `target_point` (fixed-axis also needs `axis`)
    - curl attractors need `target_point` and `axis`
    - force controllers need `axis`; `target_point` is optional and adds null-space attraction
    - rotation controllers need `ee_axis_selector` and `rotation_target`
    """

    kind: ControllerKind
    target_point: Optional[np.ndarray] = None
    axis: Optional[np.ndarray] = None
    rotation_target: Optional[np.ndarray] = None
    ee_axis_selector: Optional[np.ndarray] = None
    force_magnitude: float = 5.0
    gains: Gains = field(default_factory=Gains)
    max_step: Optional[float] = None
    keypoint_index: Optional[int] = None
    label: str = ""

    def __post_init__(self):
        kind = ControllerKind(self.kind)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "target_point", _checked_point("target_point", self.target_point))
        object.__setattr__(self, "axis", _checked_axis("axis", self.axis))
        object.__setattr__(
            self, "rotation_target", _checked_axis("rotation_target", self.rotation_target)
        )
        object.__setattr__(
            self, "ee_axis_selector", _checked_axis("ee_axis_selector", self.ee_axis_selector)
        )

        needs_point = kind in (
            ControllerKind.POSITION_ERROR_AXIS,
            ControllerKind.POSITION_FIXED_AXIS,
            ControllerKind.CURL_ATTRACTOR,
        )
        if needs_point and self.target_point is None:
            raise ControllerSpecError(f"{kind.name} requires target_point")
        if kind in (ControllerKind.POSITION_FIXED_AXIS, ControllerKind.CURL_ATTRACTOR, ControllerKind.FORCE):
            if self.axis is None:
                raise ControllerSpecError(f"{kind.name} requires axis")
        if kind is ControllerKind.FORCE and not (
            np.isfinite(self.force_magnitude) and self.force_magnitude >= 0
        ):
            raise ControllerSpecError(f"force magnitude must be >= 0, got {self.force_magnitude}")
        if kind is ControllerKind.ROTATION and (
            self.rotation_target is None or self.ee_axis_selector is None
        ):
            raise ControllerSpecError("ROTATION requires rotation_target and ee_axis_selector")
        if self.max_step is not None and not self.max_step > 0:
            raise ControllerSpecError(f"max_step must be positive, got {self.max_step}")

    @property
    def step_limit(self) -> float:
        if self.max_step is not None:
            return self.max_step
        return DEFAULT_MAX_ROTATION if self.kind.is_rotational else DEFAULT_MAX_TRANSLATION

    def to_dict(self) -> dict:
        out = {"kind": self.kind.name}
        for name in ("target_point", "axis", "rotation_target", "ee_axis_selector"):
            value = getattr(self, name)
            if value is not None:
                out[name] = [float(x) for x in value]
        if self.kind is ControllerKind.FORCE:
            out["force_magnitude"] = float(self.force_magnitude)
        out["gains"] = {"kp": self.gains.kp, "kd": self.gains.kd, "ki": self.gains.ki}
        if self.max_step is not None:
            out["max_step"] = float(self.max_step)
        if self.keypoint_index is not None:
            out["keypoint_index"] = int(self.keypoint_index)
        if self.label:
            out["label"] = self.label
        return out

    @staticmethod
    def from_dict(d: dict) -> "ControllerSpec":
        d = dict(d)
        try:
            kind = ControllerKind[d.pop("kind")]
        except KeyError as e:
            raise ControllerSpecError(f"unknown controller kind {e}") from e
        gains = Gains(**d.pop("gains", {}))
        return ControllerSpec(kind=kind, gains=gains, **d)


@dataclass(frozen=True, eq=False)
class Command:
    delta_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    delta_rotation: AngleAxis = field(default_factory=AngleAxis.zero)
    force: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gripper: GripperAction = GripperAction.HOLD
    translation_axis: Optional[np.ndarray] = None
    force_axis: Optional[np.ndarray] = None

    @staticmethod
    def zero() -> "Command":
        return Command()

    def is_zero_motion(self) -> bool:
        return (
            not np.any(self.delta_translation)
            and self.delta_rotation.angle == 0.0
            and not np.any(self.force)
        )


def clamp_norm(v: np.ndarray, max_norm: float) -> np.ndarray:
    n = float(np.linalg.norm(v))
    if n > max_norm:
        return v * (max_norm / n)
    return v


def _curl_delta(spec: ControllerSpec, x_c: np.ndarray) -> np.ndarray:
    u = spec.axis
    r = x_c - spec.target_point
    along = float(np.dot(u, r))
    r_perp = r - along * u
    radius = float(np.linalg.norm(r_perp))
    if radius < CONVERGED_DISTANCE:
        return np.zeros(3)
    dphi = spec.gains.kp * CURL_ANGLE_STEP
    # chord length 2 r sin(dphi / 2) must stay within the step limit
    half = spec.step_limit / (2.0 * radius)
    if half < 1.0:
        dphi = min(dphi, 2.0 * np.arcsin(half))
    c, s = np.cos(dphi), np.sin(dphi)
    rotated = r_perp * c + np.cross(u, r_perp) * s
    return rotated - r_perp


def compute_command(spec: ControllerSpec, ee) -> Command:
    """
    One proportional step of `spec` from end-effector state `ee` (anything with
    `position` and `rotation`).
    """
    kind = spec.kind
    x_c = np.asarray(ee.position, dtype=np.float64)
    kp = spec.gains.kp

    if kind is ControllerKind.POSITION_ERROR_AXIS:
        error = spec.target_point - x_c
        dist = float(np.linalg.norm(error))
        if dist < CONVERGED_DISTANCE:
            return Command.zero()
        u = error / dist
        delta = clamp_norm(kp * project_onto_axis(u, error), spec.step_limit)
        return Command(delta_translation=delta, translation_axis=u)

    if kind is ControllerKind.POSITION_FIXED_AXIS:
        u = spec.axis
        delta = clamp_norm(kp * project_onto_axis(u, spec.target_point - x_c), spec.step_limit)
        return Command(delta_translation=delta, translation_axis=u)

    if kind is ControllerKind.CURL_ATTRACTOR:
        delta = _curl_delta(spec, x_c)
        n = float(np.linalg.norm(delta))
        return Command(delta_translation=delta, translation_axis=delta / n if n > 0 else None)

    if kind is ControllerKind.FORCE:
        u = spec.axis
        force = spec.force_magnitude * u
        if spec.target_point is None:
            return Command(force=force, force_axis=u)
        delta = clamp_norm(kp * null_space_projector(u) @ (spec.target_point - x_c), spec.step_limit)
        n = float(np.linalg.norm(delta))
        return Command(
            delta_translation=delta,
            force=force,
            translation_axis=delta / n if n > CONVERGED_DISTANCE else None,
            force_axis=u,
        )

    if kind is ControllerKind.ROTATION:
        current = np.asarray(ee.rotation) @ spec.ee_axis_selector
        d = rotation_between(unit(current), spec.rotation_target)
        return Command(delta_rotation=d.scaled(kp).clamped(spec.step_limit))

    if kind is ControllerKind.GRIPPER_OPEN:
        return Command(gripper=GripperAction.OPEN)
    if kind is ControllerKind.GRIPPER_CLOSE:
        return Command(gripper=GripperAction.CLOSE)
    raise ControllerSpecError(f"unhandled controller kind {kind}")


@dataclass(frozen=True, eq=False)
class PidState:
    integral: np.ndarray = field(default_factory=lambda: np.zeros(3))
    prev_error: Optional[np.ndarray] = None


def pid_step(
    gains: Gains, error: np.ndarray, state: PidState, dt: float = DEFAULT_DT
) -> tuple[np.ndarray, PidState]:
    if not dt > 0:
        raise ControllerSpecError(f"dt must be positive, got {dt}")
    error = np.asarray(error, dtype=np.float64)
    integral = state.integral + error * dt
    if state.prev_error is None:
        derivative = np.zeros(3)
    else:
        derivative = (error - state.prev_error) / dt
    out = gains.kp * error + gains.kd * derivative + gains.ki * integral
    return out, PidState(integral=integral, prev_error=error)


def compose_commands(
    ordered: Sequence[Command],
    max_translation: float = DEFAULT_MAX_TRANSLATION,
    max_rotation: float = DEFAULT_MAX_ROTATION,
) -> Command:
    """
    Compose commands in priority order: each lower-priority translation (and force) is
    projected into the null space of all higher-priority axes; rotations are summed with
    weights 2^-i. The composed translation and rotation are clamped to the step limits.
    """
    if not ordered:
        raise ControllerSpecError("cannot compose an empty command list")
    if len(ordered) == 1:
        return ordered[0]

    translation = np.zeros(3)
    force = np.zeros(3)
    n_trans = np.eye(3)
    n_force = np.eye(3)
    rotvec = np.zeros(3)
    gripper = GripperAction.HOLD
    for i, cmd in enumerate(ordered):
        translation = translation + n_trans @ cmd.delta_translation
        force = force + n_force @ cmd.force
        if cmd.translation_axis is not None:
            n_trans = n_trans @ null_space_projector(cmd.translation_axis)
        if cmd.force_axis is not None:
            n_force = n_force @ null_space_projector(cmd.force_axis)
        rotvec = rotvec + (2.0**-i) * cmd.delta_rotation.rotvec
        if gripper is GripperAction.HOLD:
            gripper = cmd.gripper

    return Command(
        delta_translation=clamp_norm(translation, max_translation),
        delta_rotation=AngleAxis.from_rotvec(rotvec).clamped(max_rotation),
        force=force,
        gripper=gripper,
        translation_axis=ordered[0].translation_axis,
        force_axis=ordered[0].force_axis,
    )


class ControllerRunner:
    """
    Executes a prioritized list of specs, one command per simulator substep.

    With `use_pid` the position kinds run through `pid_step` with per-spec state owned by
    this runner; otherwise each step is the stateless proportional law.
    """

    def __init__(self, specs: Sequence[ControllerSpec], use_pid: bool = False, dt: float = DEFAULT_DT):
        if not specs:
            raise ControllerSpecError("runner needs at least one controller")
        self.specs = list(specs)
        self.use_pid = use_pid
        self.dt = dt
        self._pid = [PidState() for _ in self.specs]
        self.max_translation = max(
            (s.step_limit for s in self.specs if not s.kind.is_rotational), default=DEFAULT_MAX_TRANSLATION
        )

    def _pid_command(self, idx: int, spec: ControllerSpec, ee) -> Command:
        x_c = np.asarray(ee.position, dtype=np.float64)
        error = spec.target_point - x_c
        if spec.kind is ControllerKind.POSITION_FIXED_AXIS:
            u = spec.axis
            error = project_onto_axis(u, error)
        else:
            dist = float(np.linalg.norm(error))
            if dist < CONVERGED_DISTANCE:
                return Command.zero()
            u = error / dist
        out, self._pid[idx] = pid_step(spec.gains, error, self._pid[idx], self.dt)
        return Command(delta_translation=clamp_norm(out, spec.step_limit), translation_axis=u)

    def __call__(self, ee) -> Command:
        commands = []
        for idx, spec in enumerate(self.specs):
            if self.use_pid and spec.kind in (
                ControllerKind.POSITION_ERROR_AXIS,
                ControllerKind.POSITION_FIXED_AXIS,
            ):
                commands.append(self._pid_command(idx, spec, ee))
            else:
                commands.append(compute_command(spec, ee))
        return compose_commands(commands, max_translation=self.max_translation)


