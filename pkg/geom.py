"""
Small 3D geometry kernel shared by the controllers, the simulator and the renderer.

Vectors are float64 arrays of shape (3,), rotations are 3x3 matrices. Pixels are
(u, v) = (column, row) and camera frames follow the OpenCV convention
(x right, y down, z forward).
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

ORTHO_DRIFT_TOL = 1e-8
ANTIPARALLEL_TOL = 1e-9


class GeometryError(ValueError):
    pass


def vec3(x, y=None, z=None) -> np.ndarray:
    if y is None:
        v = np.asarray(x, dtype=np.float64).reshape(3)
    else:
        v = np.array([x, y, z], dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise GeometryError(f"non-finite vector {v}")
    return v


def unit(v) -> np.ndarray:
    v = vec3(v)
    n = np.linalg.norm(v)
    if n < 1e-12:
        raise GeometryError("cannot normalize a zero vector")
    return v / n


@dataclass(frozen=True)
class AngleAxis:
    """
    Rotation as an angle (radians) about a unit axis. A zero rotation may carry any axis.
    """

    angle: float
    axis: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))

    @staticmethod
    def zero() -> "AngleAxis":
        return AngleAxis(0.0, np.array([0.0, 0.0, 1.0]))

    @staticmethod
    def from_rotvec(rotvec) -> "AngleAxis":
        rotvec = vec3(rotvec)
        angle = float(np.linalg.norm(rotvec))
        if angle < 1e-15:
            return AngleAxis.zero()
        return AngleAxis(angle, rotvec / angle)

    @property
    def rotvec(self) -> np.ndarray:
        return self.angle * np.asarray(self.axis, dtype=np.float64)

    def scaled(self, factor: float) -> "AngleAxis":
        return AngleAxis(self.angle * factor, self.axis)

    def clamped(self, max_angle: float) -> "AngleAxis":
        if abs(self.angle) <= max_angle:
            return self
        return AngleAxis(float(np.sign(self.angle)) * max_angle, self.axis)


def project_onto_axis(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """
    Apply P(u) = u u^T to v.
    """
    return float(np.dot(u, v)) * np.asarray(u, dtype=np.float64)


def projection_matrix(u: np.ndarray) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    return np.outer(u, u)


def null_space_projector(u: np.ndarray) -> np.ndarray:
    return np.eye(3) - projection_matrix(u)


def _antiparallel_axis(a: np.ndarray) -> np.ndarray:
    # helper basis vector: smallest index other than a's dominant component
    k = int(np.argmax(np.abs(a)))
    m = 0 if k != 0 else 1
    e_m = np.zeros(3)
    e_m[m] = 1.0
    return unit(np.cross(a, e_m))


def rotation_between(a: np.ndarray, b: np.ndarray) -> AngleAxis:
    """
    Smallest rotation taking unit vector a onto unit vector b, with a normalized axis.

    Antiparallel inputs return an angle of pi about a deterministic axis orthogonal to a.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    dot = float(np.clip(np.dot(a, b), -1.0, 1.0))
    if dot <= -1.0 + ANTIPARALLEL_TOL:
        return AngleAxis(float(np.pi), _antiparallel_axis(a))
    cross = np.cross(a, b)
    sin = float(np.linalg.norm(cross))
    angle = float(np.arctan2(sin, dot))
    if sin < 1e-15:
        return AngleAxis(angle, np.array([0.0, 0.0, 1.0]))
    return AngleAxis(angle, cross / sin)


def exp_map(d: AngleAxis) -> np.ndarray:
    return Rotation.from_rotvec(d.rotvec).as_matrix()


def orthonormalize(R: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(R)
    out = U @ Vt
    if np.linalg.det(out) < 0:
        U[:, -1] *= -1
        out = U @ Vt
    return out


def orthonormality_error(R: np.ndarray) -> float:
    return float(np.max(np.abs(R.T @ R - np.eye(3))))


def apply_delta_rotation(d: AngleAxis, R: np.ndarray) -> np.ndarray:
    out = exp_map(d) @ np.asarray(R, dtype=np.float64)
    if orthonormality_error(out) > ORTHO_DRIFT_TOL:
        out = orthonormalize(out)
    return out


def rotate(d: AngleAxis, v: np.ndarray) -> np.ndarray:
    return exp_map(d) @ np.asarray(v, dtype=np.float64)


def rotation_angle_between(R_a: np.ndarray, R_b: np.ndarray) -> float:
    """
    Geodesic angle of R_a^T R_b, in [0, pi].
    """
    c = (np.trace(R_a.T @ R_b) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def rot_x(angle: float) -> np.ndarray:
    return Rotation.from_euler("x", angle).as_matrix()


def rot_y(angle: float) -> np.ndarray:
    return Rotation.from_euler("y", angle).as_matrix()


def rot_z(angle: float) -> np.ndarray:
    return Rotation.from_euler("z", angle).as_matrix()


def quaternion_xyzw(R: np.ndarray) -> np.ndarray:
    q = Rotation.from_matrix(R).as_quat()
    if q[3] < 0:
        q = -q
    return q / np.linalg.norm(q)


def homogeneous(R: np.ndarray, t: np.ndarray) -> np.ndarray:
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = t
    return T


@dataclass(frozen=True)
class CameraModel:
    """
    Pinhole camera. `rotation` and `position` give the camera-to-world pose.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    position: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if not (0 <= self.cx <= self.width - 1 and 0 <= self.cy <= self.height - 1):
            raise GeometryError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )
        if orthonormality_error(np.asarray(self.rotation)) > 1e-6:
            raise GeometryError("camera rotation is not orthonormal")

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def world_from_camera(self) -> np.ndarray:
        return homogeneous(self.rotation, self.position)

    def camera_from_world(self) -> np.ndarray:
        R = np.asarray(self.rotation)
        return homogeneous(R.T, -R.T @ np.asarray(self.position))

    def to_dict(self) -> dict:
        return {
            "fx": float(self.fx),
            "fy": float(self.fy),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "rotation": np.asarray(self.rotation).tolist(),
            "position": np.asarray(self.position).tolist(),
            "width": int(self.width),
            "height": int(self.height),
        }

    @staticmethod
    def from_dict(d: dict) -> "CameraModel":
        return CameraModel(
            fx=d["fx"],
            fy=d["fy"],
            cx=d["cx"],
            cy=d["cy"],
            rotation=np.asarray(d["rotation"], dtype=np.float64),
            position=np.asarray(d["position"], dtype=np.float64),
            width=int(d["width"]),
            height=int(d["height"]),
        )


def camera_from_fov(
    rotation: np.ndarray, position: np.ndarray, width: int, height: int, fov_deg: float = 60.0
) -> CameraModel:
    f = 0.5 * width / np.tan(np.deg2rad(fov_deg) / 2.0)
    return CameraModel(
        fx=f,
        fy=f,
        cx=(width - 1) / 2.0,
        cy=(height - 1) / 2.0,
        rotation=np.asarray(rotation, dtype=np.float64),
        position=vec3(position),
        width=width,
        height=height,
    )


def look_at(
    eye, target, width: int, height: int, fov_deg: float = 60.0, up=(0.0, 0.0, 1.0)
) -> CameraModel:
    """
    Camera at `eye` with its optical axis pointing at `target`.
    """
    eye = vec3(eye)
    z = unit(vec3(target) - eye)
    up = vec3(up)
    if abs(np.dot(z, up)) > 1.0 - 1e-6:
        up = np.array([0.0, 1.0, 0.0]) if abs(z[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    x = unit(np.cross(z, up))
    y = np.cross(z, x)
    return camera_from_fov(np.column_stack([x, y, z]), eye, width, height, fov_deg)


def backproject_pixel(p, depth: float, cam: CameraModel) -> np.ndarray:
    u, v = float(p[0]), float(p[1])
    if not (np.isfinite(depth) and depth > 0):
        raise GeometryError(f"depth must be positive, got {depth}")
    if not (-0.5 <= u <= cam.width - 0.5 and -0.5 <= v <= cam.height - 0.5):
        raise GeometryError(f"pixel ({u}, {v}) outside {cam.width}x{cam.height} image")
    p_cam = np.array([(u - cam.cx) * depth / cam.fx, (v - cam.cy) * depth / cam.fy, depth])
    return np.asarray(cam.rotation) @ p_cam + np.asarray(cam.position)


def project_point(x, cam: CameraModel) -> tuple[np.ndarray, float]:
    """
    Project a world point; returns ((u, v), camera depth).
    """
    R = np.asarray(cam.rotation)
    p_cam = R.T @ (vec3(x) - np.asarray(cam.position))
    if p_cam[2] <= 0:
        raise GeometryError("point is behind the camera")
    u = cam.fx * p_cam[0] / p_cam[2] + cam.cx
    v = cam.fy * p_cam[1] / p_cam[2] + cam.cy
    return np.array([u, v]), float(p_cam[2])


def project_points(points: np.ndarray, cam: CameraModel) -> tuple[np.ndarray, np.ndarray]:
    R = np.asarray(cam.rotation)
    p_cam = (np.asarray(points) - np.asarray(cam.position)) @ R
    z = p_cam[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.fx * p_cam[..., 0] / z + cam.cx
        v = cam.fy * p_cam[..., 1] / z + cam.cy
    return np.stack([u, v], axis=-1), z


def pixel_rays(cam: CameraModel) -> tuple[np.ndarray, np.ndarray]:
    """
    World-frame ray origin and per-pixel directions (H, W, 3) scaled so that
    the camera-z component equals 1, i.e. hit distance along a ray is camera depth.
    """
    vs, us = np.meshgrid(np.arange(cam.height), np.arange(cam.width), indexing="ij")
    d_cam = np.stack(
        [(us - cam.cx) / cam.fx, (vs - cam.cy) / cam.fy, np.ones_like(us, dtype=np.float64)],
        axis=-1,
    )
    return np.asarray(cam.position, dtype=np.float64), d_cam @ np.asarray(cam.rotation).T
