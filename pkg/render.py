"""
Synthetic multi-view renderer.

Scenes are ray cast against their analytic primitives. Each view carries a shaded feature
image, camera-z depth, an object-id mask and the object-local hit coordinates, which give
exact cross-view pixel correspondences.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import cv2
import numpy as np
import yaml

from common import ensure_dir, make_rng
from geom import CameraModel, look_at, pixel_rays, project_points
from sim import Primitive, SceneModel, TaskFamily, sample_variation

logger = logging.getLogger(__name__)

BACKGROUND_ID = -1
BACKGROUND_DEPTH = 0.0
LIGHT_DIRECTION = np.array([0.3, -0.4, 1.0]) / np.linalg.norm([0.3, -0.4, 1.0])
AMBIENT = 0.3
PATTERN_FREQUENCY = np.array([[9.0, 3.0, 5.0], [4.0, 8.0, 2.0], [2.5, 5.0, 9.5]])
_EPS = 1e-9


class RenderError(ValueError):
    pass


@dataclass(frozen=True)
class RenderConfig:
    width: int = 128
    height: int = 128
    fov_deg: float = 60.0
    radius_range: tuple = (0.5, 1.0)
    elevation_range_deg: tuple = (20.0, 75.0)
    azimuth_range_deg: tuple = (-70.0, 70.0)
    min_separation_deg: float = 20.0
    occlusion_tolerance: float = 0.005
    views_per_scene: int = 6
    scenes: int = 8


@dataclass(frozen=True, eq=False)
class RenderedView:
    features: np.ndarray
    depth: np.ndarray
    mask: np.ndarray
    coords: np.ndarray
    camera: CameraModel
    object_poses: dict = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape

    def to_world(self, object_id: int, local: np.ndarray) -> np.ndarray:
        R, c = self.object_poses[object_id]
        return local @ R.T + c


@dataclass(frozen=True, eq=False)
class CorrespondencePair:
    pixel_a: np.ndarray
    pixel_b: np.ndarray
    depth_b: float
    valid: bool


def _intersect_box(o_l: np.ndarray, d_l: np.ndarray, half: np.ndarray):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d_l
        t1 = (-half - o_l) * inv
        t2 = (half - o_l) * inv
    t1 = np.where(np.isnan(t1), -np.inf, t1)
    t2 = np.where(np.isnan(t2), np.inf, t2)
    t_near = np.minimum(t1, t2)
    t_far = np.maximum(t1, t2)
    t_min = t_near.max(axis=-1)
    t_max = t_far.min(axis=-1)
    hit = (t_max >= t_min) & (t_min > _EPS)
    face = np.argmax(t_near, axis=-1)
    normal = np.zeros_like(d_l)
    sign = -np.sign(np.take_along_axis(d_l, face[..., None], axis=-1))[..., 0]
    np.put_along_axis(normal, face[..., None], sign[..., None], axis=-1)
    return np.where(hit, t_min, np.inf), normal


def _intersect_cylinder(o_l: np.ndarray, d_l: np.ndarray, radius: float, half_height: float):
    dx, dy, dz = d_l[..., 0], d_l[..., 1], d_l[..., 2]
    ox, oy, oz = o_l
    a = dx * dx + dy * dy
    b = 2.0 * (ox * dx + oy * dy)
    c = ox * ox + oy * oy - radius * radius
    disc = b * b - 4.0 * a * c
    with np.errstate(divide="ignore", invalid="ignore"):
        t_side = (-b - np.sqrt(np.maximum(disc, 0.0))) / (2.0 * a)
        side_ok = (disc >= 0) & (a > _EPS) & (t_side > _EPS) & (np.abs(oz + t_side * dz) <= half_height)
        t_side = np.where(side_ok, t_side, np.inf)

        best = t_side
        ts = np.where(side_ok, t_side, 0.0)
        normal = np.stack([ox + ts * dx, oy + ts * dy, np.zeros_like(dx)], axis=-1) / radius
        for cap in (half_height, -half_height):
            t_cap = (cap - oz) / dz
            px, py = ox + t_cap * dx, oy + t_cap * dy
            cap_ok = (np.abs(dz) > _EPS) & (t_cap > _EPS) & (px * px + py * py <= radius * radius)
            t_cap = np.where(cap_ok, t_cap, np.inf)
            closer = t_cap < best
            best = np.where(closer, t_cap, best)
            cap_normal = np.zeros_like(normal)
            cap_normal[..., 2] = np.sign(cap)
            normal = np.where(closer[..., None], cap_normal, normal)
    return best, normal


def _shade(albedo: np.ndarray, local: np.ndarray, normal_world: np.ndarray) -> np.ndarray:
    lambert = np.clip(normal_world @ LIGHT_DIRECTION, 0.0, None)
    intensity = AMBIENT + (1.0 - AMBIENT) * lambert
    pattern = 0.8 + 0.2 * np.cos(2.0 * np.pi * local @ PATTERN_FREQUENCY.T)
    return np.clip(albedo * pattern * intensity[..., None], 0.0, 1.0)


def render_primitives(primitives: Sequence[Primitive], cam: CameraModel) -> RenderedView:
    if not (np.all(np.isfinite(cam.rotation)) and np.all(np.isfinite(cam.position))):
        raise RenderError("camera pose is not finite")
    if cam.width < 1 or cam.height < 1:
        raise RenderError(f"degenerate image size {cam.width}x{cam.height}")
    origin, dirs = pixel_rays(cam)
    H, W = cam.height, cam.width
    depth = np.full((H, W), np.inf)
    mask = np.full((H, W), BACKGROUND_ID, dtype=np.int32)
    coords = np.zeros((H, W, 3))
    features = np.zeros((H, W, 3))
    poses = {}

    for prim in primitives:
        R = np.asarray(prim.rotation)
        o_l = R.T @ (origin - prim.center)
        d_l = dirs @ R
        if prim.shape == "box":
            t, n_l = _intersect_box(o_l, d_l, np.asarray(prim.half_extents))
        elif prim.shape == "cylinder":
            t, n_l = _intersect_cylinder(o_l, d_l, float(prim.half_extents[0]), float(prim.half_extents[2]))
        else:
            raise RenderError(f"unknown primitive shape {prim.shape!r}")
        closer = t < depth
        if not np.any(closer):
            poses[prim.object_id] = (R, np.asarray(prim.center))
            continue
        local = o_l + np.where(np.isfinite(t), t, 0.0)[..., None] * d_l
        depth = np.where(closer, t, depth)
        mask = np.where(closer, prim.object_id, mask)
        coords = np.where(closer[..., None], local, coords)
        shaded = _shade(np.asarray(prim.albedo), local, n_l @ R.T)
        features = np.where(closer[..., None], shaded, features)
        poses[prim.object_id] = (R, np.asarray(prim.center))

    depth = np.where(mask == BACKGROUND_ID, BACKGROUND_DEPTH, depth)
    return RenderedView(features, depth, mask, coords, cam, poses)


def render_view(scene: SceneModel, cam: CameraModel) -> RenderedView:
    return render_primitives(scene.primitives(), cam)


def correspondences(a: RenderedView, b: RenderedView, n: int, rng: np.random.Generator, occlusion_tolerance: float = 0.005) -> list[CorrespondencePair]:
    """
    Sample `n` on-object pixels of view `a` and map them into view `b` through their
    object-local coordinates. Targets outside `b`, on another object or behind a nearer
    surface are flagged invalid.
    """
    rows, cols = np.nonzero(a.mask != BACKGROUND_ID)
    if rows.size == 0 or n <= 0:
        return []
    pick = rng.choice(rows.size, size=n, replace=rows.size < n)
    rows, cols = rows[pick], cols[pick]
    ids = a.mask[rows, cols]
    local = a.coords[rows, cols]
    world = np.stack([a.to_world(int(i), l) for i, l in zip(ids, local)])
    uv, z = project_points(world, b.camera)

    H, W = b.shape
    out = []
    for k in range(n):
        u, v = uv[k]
        valid = bool(z[k] > 0 and -0.5 <= u < W - 0.5 and -0.5 <= v < H - 0.5)
        if valid:
            ui, vi = int(round(u)), int(round(v))
            valid = b.mask[vi, ui] == ids[k] and abs(b.depth[vi, ui] - z[k]) <= occlusion_tolerance
        out.append(CorrespondencePair(np.array([cols[k], rows[k]]), np.array([u, v]), float(z[k]), bool(valid)))
    return out


def scene_focus(scene: SceneModel) -> np.ndarray:
    return np.mean(np.stack(scene.semantic_keypoints()), axis=0)


def sample_cameras(target: np.ndarray, n: int, rng: np.random.Generator, config: RenderConfig = RenderConfig(), max_tries: int = 1000) -> list[CameraModel]:
    """
    Look-at cameras on a hemisphere around `target`, viewing from the robot side, at
    least `min_separation_deg` apart.
    """
    min_sep = np.deg2rad(config.min_separation_deg)
    directions: list[np.ndarray] = []
    cams = []
    for _ in range(max_tries):
        if len(cams) == n:
            break
        el = np.deg2rad(rng.uniform(*config.elevation_range_deg))
        az = np.deg2rad(rng.uniform(*config.azimuth_range_deg))
        d = np.array([-np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        if any(np.arccos(np.clip(d @ o, -1.0, 1.0)) < min_sep for o in directions):
            continue
        radius = rng.uniform(*config.radius_range)
        directions.append(d)
        cams.append(look_at(target + radius * d, target, config.width, config.height, config.fov_deg))
    if len(cams) < n:
        raise RenderError(f"could only place {len(cams)} of {n} cameras {config.min_separation_deg} deg apart")
    return cams


def to_bgr8(features: np.ndarray) -> np.ndarray:
    rgb = np.clip(np.round(features * 255.0), 0, 255).astype(np.uint8)
    return cv2.cvtColor(rgb, cv2.COLOR_RGB2BGR)


def save_view(view: RenderedView, stem: Union[str, Path]) -> None:
    stem = Path(stem)
    ids = sorted(view.object_poses)
    np.savez_compressed(
        stem.with_suffix(".npz"),
        features=view.features,
        depth=view.depth,
        mask=view.mask,
        coords=view.coords,
        object_ids=np.array(ids, dtype=np.int32),
        object_rotations=np.stack([view.object_poses[i][0] for i in ids]) if ids else np.zeros((0, 3, 3)),
        object_centers=np.stack([view.object_poses[i][1] for i in ids]) if ids else np.zeros((0, 3)),
    )
    cv2.imwrite(str(stem.with_suffix(".png")), to_bgr8(view.features))


def load_view(stem: Union[str, Path], camera: CameraModel) -> RenderedView:
    with np.load(Path(stem).with_suffix(".npz")) as data:
        poses = {
            int(i): (R, c)
            for i, R, c in zip(data["object_ids"], data["object_rotations"], data["object_centers"])
        }
        return RenderedView(data["features"], data["depth"], data["mask"], data["coords"], camera, poses)


def write_dataset(root: Union[str, Path], family: Union[TaskFamily, str], seed: int, config: RenderConfig = RenderConfig()) -> Path:
    """
    Render `config.scenes` variations with `config.views_per_scene` views each:
    <root>/scene_XXX/view_YYY.{npz,png} plus <root>/manifest.yaml.
    """
    family = TaskFamily(family)
    root = ensure_dir(root)
    manifest = {"family": family.value, "seed": int(seed), "width": config.width, "height": config.height, "scenes": []}
    for s in range(config.scenes):
        rng = make_rng(seed, "dataset", s)
        variation_seed = int(rng.integers(0, 1_000_000))
        scene = sample_variation(family, make_rng(variation_seed, "variation"))
        cams = sample_cameras(scene_focus(scene), config.views_per_scene, rng, config)
        scene_dir = ensure_dir(root / f"scene_{s:03d}")
        views = []
        for v, cam in enumerate(cams):
            save_view(render_view(scene, cam), scene_dir / f"view_{v:03d}")
            views.append({"stem": f"view_{v:03d}", "camera": cam.to_dict()})
        manifest["scenes"].append(
            {"dir": scene_dir.name, "variation_seed": variation_seed, "variation": scene.variation_record(), "views": views}
        )
        logger.info("rendered scene %d/%d (%d views)", s + 1, config.scenes, len(cams))
    with open(root / "manifest.yaml", "w") as f:
        yaml.safe_dump(manifest, f, sort_keys=False)
    return root


def load_dataset(root: Union[str, Path]) -> list[list[RenderedView]]:
    root = Path(root)
    with open(root / "manifest.yaml") as f:
        manifest = yaml.safe_load(f)
    scenes = []
    for entry in manifest["scenes"]:
        scene_dir = root / entry["dir"]
        scenes.append([load_view(scene_dir / v["stem"], CameraModel.from_dict(v["camera"])) for v in entry["views"]])
    return scenes


def render_dataset(family: Union[TaskFamily, str], seed: int, config: RenderConfig = RenderConfig(), offset: int = 0) -> list[tuple[SceneModel, list[RenderedView]]]:
    """
    In-memory variant of `write_dataset`; `offset` shifts the scene index so held-out
    scenes never coincide with training scenes.
    """
    out = []
    for s in range(offset, offset + config.scenes):
        rng = make_rng(seed, "dataset", s)
        variation_seed = int(rng.integers(0, 1_000_000))
        scene = sample_variation(family, make_rng(variation_seed, "variation"))
        cams = sample_cameras(scene_focus(scene), config.views_per_scene, rng, config)
        out.append((scene, [render_view(scene, cam) for cam in cams]))
    return out
