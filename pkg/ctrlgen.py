"""
Candidate-axes extraction and combinatorial controller generation.

Generated sets are ordered by (kind, keypoint index, axis index, sign) so that action
indices are stable across runs. Manual sets are read from YAML files that reference
keypoints by index and axes by object-frame name.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import yaml

from controllers import ControllerKind, ControllerSpec, Gains
from sim import KEYPOINT_COUNTS, SceneModel, TaskFamily

logger = logging.getLogger(__name__)

DEDUP_TOL = 1e-9
EE_AXES = (np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]), np.array([0.0, 0.0, 1.0]))
AXIS_NAMES = {"x": 0, "y": 1, "z": 2}


class ControllerGenerationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class CandidateAxes:
    axes: tuple
    provenance: tuple

    def __len__(self) -> int:
        return len(self.axes)

    def object_axes(self) -> list[np.ndarray]:
        return [a for a, tag in zip(self.axes, self.provenance) if tag == "object_axis"]


def extract_candidate_axes(scene: SceneModel, include_global: bool = False) -> CandidateAxes:
    R = np.asarray(scene.focus_rotation(), dtype=np.float64)
    axes = [R[:, i].copy() for i in range(3)]
    provenance = ["object_axis"] * 3
    if include_global:
        for g in np.eye(3):
            if not any(np.max(np.abs(a - g)) <= DEDUP_TOL for a in axes):
                axes.append(g.copy())
                provenance.append("global_axis")
    return CandidateAxes(tuple(axes), tuple(provenance))


@dataclass(frozen=True, eq=False)
class ControllerSet:
    controllers: tuple
    family: TaskFamily
    keypoint_count: int

    def __len__(self) -> int:
        return len(self.controllers)

    def __getitem__(self, idx: int) -> ControllerSpec:
        return self.controllers[idx]

    def to_dict(self) -> dict:
        return {
            "family": self.family.value,
            "keypoint_count": int(self.keypoint_count),
            "controllers": [c.to_dict() for c in self.controllers],
        }

    @staticmethod
    def from_dict(d: dict) -> "ControllerSet":
        return ControllerSet(
            controllers=tuple(ControllerSpec.from_dict(c) for c in d["controllers"]),
            family=TaskFamily(d["family"]),
            keypoint_count=int(d["keypoint_count"]),
        )

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def _keypoint_array(keypoints: Sequence) -> list[np.ndarray]:
    out = []
    for k in keypoints:
        k = np.asarray(k, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(k)):
            raise ControllerGenerationError(f"non-finite keypoint {k}")
        out.append(k)
    return out


def generate_controllers(
    family: Union[TaskFamily, str],
    keypoints: Sequence,
    axes: CandidateAxes,
    keypoint_count: Optional[int] = None,
    gains: Optional[Gains] = None,
    force_magnitude: float = 5.0,
) -> ControllerSet:
    """
    Build the combinatorial controller set for a task family.

    With object axes only the counts are 14 (button), 40 (block) and 51 (door).
    `keypoint_count` overrides the family's default keypoint count.
    """
    try:
        family = TaskFamily(family)
    except ValueError as e:
        raise ControllerGenerationError(f"unknown task family {family!r}") from e
    expected = KEYPOINT_COUNTS[family] if keypoint_count is None else int(keypoint_count)
    kps = _keypoint_array(keypoints)
    if len(kps) != expected:
        raise ControllerGenerationError(f"{family.value} needs {expected} keypoints, got {len(kps)}")
    gains = gains or Gains()
    signs = (1.0, -1.0)
    keyed: list[tuple[tuple, ControllerSpec]] = []

    def add(key, **kwargs):
        keyed.append((key, ControllerSpec(gains=gains, **kwargs)))

    for i, kp in enumerate(kps):
        add((ControllerKind.POSITION_ERROR_AXIS, i, -1, 0), kind=ControllerKind.POSITION_ERROR_AXIS, target_point=kp, keypoint_index=i)

    if family is TaskFamily.BUTTON:
        for i, kp in enumerate(kps):
            for a, u in enumerate(axes.axes):
                add((ControllerKind.POSITION_FIXED_AXIS, i, a, 0), kind=ControllerKind.POSITION_FIXED_AXIS, target_point=kp, axis=u, keypoint_index=i)
        for a, u in enumerate(axes.axes):
            for s, sign in enumerate(signs):
                add((ControllerKind.FORCE, -1, a, s), kind=ControllerKind.FORCE, axis=sign * u, force_magnitude=force_magnitude)

    elif family is TaskFamily.BLOCK:
        for i, kp in enumerate(kps):
            for a, u in enumerate(axes.axes):
                add((ControllerKind.FORCE, i, a, 0), kind=ControllerKind.FORCE, target_point=kp, axis=u, force_magnitude=force_magnitude, keypoint_index=i)

    else:
        add((ControllerKind.GRIPPER_OPEN, -1, -1, 0), kind=ControllerKind.GRIPPER_OPEN)
        add((ControllerKind.GRIPPER_CLOSE, -1, -1, 0), kind=ControllerKind.GRIPPER_CLOSE)
        n_axes = len(axes)
        for e, sel in enumerate(EE_AXES):
            for a, u in enumerate(axes.axes):
                for s, sign in enumerate(signs):
                    add(
                        (ControllerKind.ROTATION, -1, e * n_axes + a, s),
                        kind=ControllerKind.ROTATION,
                        ee_axis_selector=sel,
                        rotation_target=sign * u,
                    )
        for i, kp in enumerate(kps):
            for a, u in enumerate(axes.axes):
                add((ControllerKind.CURL_ATTRACTOR, i, a, 0), kind=ControllerKind.CURL_ATTRACTOR, target_point=kp, axis=u, keypoint_index=i)
                add((ControllerKind.FORCE, i, a, 0), kind=ControllerKind.FORCE, target_point=kp, axis=u, force_magnitude=force_magnitude, keypoint_index=i)
        for a, u in enumerate(axes.axes):
            add((ControllerKind.FORCE, -1, a, 1), kind=ControllerKind.FORCE, axis=-u, force_magnitude=force_magnitude)

    keyed.sort(key=lambda item: (int(item[0][0]),) + item[0][1:])
    controllers = tuple(spec for _, spec in keyed)
    logger.debug("generated %d %s controllers", len(controllers), family.value)
    return ControllerSet(controllers, family, len(kps))


def _named_axis(name: str, frame: np.ndarray) -> np.ndarray:
    name = str(name).strip()
    sign = -1.0 if name.startswith("-") else 1.0
    key = name.lstrip("+-")
    if key not in AXIS_NAMES:
        raise ControllerGenerationError(f"unknown axis name {name!r}")
    return sign * frame[:, AXIS_NAMES[key]]


def load_manual_set(path: Union[str, Path]) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with open(path) as f:
        manual = yaml.safe_load(f)
    if not isinstance(manual, dict) or "controllers" not in manual:
        raise ControllerGenerationError(f"{path} is not a manual controller file")
    return manual


def resolve_manual_controllers(
    manual: dict,
    keypoints: Sequence,
    focus_rotation: np.ndarray,
    gains: Optional[Gains] = None,
    force_magnitude: float = 5.0,
) -> ControllerSet:
    """
    Turn a manual controller description into concrete specs. Entries name keypoints by
    index, object axes as "x", "-y", ... in the focus object's frame and EE axes in the
    end-effector frame.
    """
    family = TaskFamily(manual["family"])
    kps = _keypoint_array(keypoints)
    gains = gains or Gains()
    R = np.asarray(focus_rotation, dtype=np.float64)
    specs = []
    for entry in manual["controllers"]:
        kind = ControllerKind[entry["kind"]]
        kwargs = {"kind": kind, "gains": gains, "label": entry.get("label", "")}
        if "keypoint" in entry:
            idx = int(entry["keypoint"])
            if not 0 <= idx < len(kps):
                raise ControllerGenerationError(f"manual entry references keypoint {idx} of {len(kps)}")
            kwargs["target_point"] = kps[idx]
            kwargs["keypoint_index"] = idx
        if "axis" in entry:
            kwargs["axis"] = _named_axis(entry["axis"], R)
        if "rotation_target" in entry:
            kwargs["rotation_target"] = _named_axis(entry["rotation_target"], R)
        if "ee_axis" in entry:
            kwargs["ee_axis_selector"] = _named_axis(entry["ee_axis"], np.eye(3))
        if kind is ControllerKind.FORCE:
            kwargs["force_magnitude"] = float(entry.get("force_magnitude", force_magnitude))
        specs.append(ControllerSpec(**kwargs))
    return ControllerSet(tuple(specs), family, len(kps))
