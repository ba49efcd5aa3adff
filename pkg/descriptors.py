"""
Dense pixelwise object descriptors.

A small fully convolutional network maps an RGB view to an H x W x D descriptor image.
It is trained with a pixelwise contrastive loss on renderer correspondences, then used to
transfer a single annotated reference view's keypoints to new views by nearest-neighbor
search in descriptor space.
"""

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import cv2
import numpy as np
import yaml

from common import ctrl_c_handler, ensure_dir, make_rng
from diffkernel import Adam, Concat, Conv2d, Graph, MaxPool2d, ReLU, Upsample2x, load_checkpoint, save_checkpoint
from geom import CameraModel, GeometryError, backproject_pixel, project_points
from render import BACKGROUND_ID, RenderConfig, RenderedView, correspondences, sample_cameras, scene_focus, render_view, to_bgr8
from sim import KEYPOINT_COUNTS, SceneModel, TaskFamily

logger = logging.getLogger(__name__)

KEYPOINT_LABELS = {
    TaskFamily.BUTTON: ("button_cap", "top_mirror"),
    TaskFamily.BLOCK: tuple(f"top_{i}" for i in range(10)),
    TaskFamily.DOOR: ("lever_root", "lever_mid", "lever_grip", "lever_tip"),
}
VISIBILITY_TOLERANCE = 0.01


class DatasetError(ValueError):
    pass


class KeypointError(ValueError):
    pass


@dataclass(frozen=True)
class DescriptorConfig:
    descriptor_dim: int = 3
    channels: tuple = (16, 32, 32)
    margin: float = 0.5
    n_matches: int = 100
    n_non_matches: int = 100
    non_match_min_distance: float = 5.0
    lr: float = 1e-3
    steps: int = 2000
    max_grad_norm: Optional[float] = None
    confidence_factor: float = 3.0
    log_every: int = 50

    def __post_init__(self):
        if self.descriptor_dim < 1 or len(self.channels) != 3 or min(self.channels) < 1:
            raise ValueError("descriptor_dim must be >= 1 and channels must list three positive widths")
        if self.margin <= 0 or self.n_matches < 1 or self.n_non_matches < 0:
            raise ValueError("margin and match counts must be positive")


def build_descriptor_graph(config: DescriptorConfig, rng: Optional[np.random.Generator] = None) -> Graph:
    """
    Two-level encoder/decoder with skip connections. Input spatial sizes must be
    divisible by 4; the output "descriptors" node has the input's spatial size.
    """
    c0, c1, c2 = config.channels
    g = Graph()
    x = g.input("image")
    e1 = g.add("enc1_relu", ReLU(), g.add("enc1", Conv2d(3, c0, rng=rng), x))
    e2 = g.add("enc2_relu", ReLU(), g.add("enc2", Conv2d(c0, c1, rng=rng), g.add("pool1", MaxPool2d(), e1)))
    e3 = g.add("enc3_relu", ReLU(), g.add("enc3", Conv2d(c1, c2, rng=rng), g.add("pool2", MaxPool2d(), e2)))
    u2 = g.add("cat2", Concat(), g.add("up2", Upsample2x(), e3), e2)
    d2 = g.add("dec2_relu", ReLU(), g.add("dec2", Conv2d(c2 + c1, c1, rng=rng), u2))
    u1 = g.add("cat1", Concat(), g.add("up1", Upsample2x(), d2), e1)
    d1 = g.add("dec1_relu", ReLU(), g.add("dec1", Conv2d(c1 + c0, c0, rng=rng), u1))
    g.add("descriptors", Conv2d(c0, config.descriptor_dim, kernel_size=1, padding=0, rng=rng), d1)
    return g


class DescriptorModel:
    """
    Trained descriptor network plus the training-set median match distance used to gate
    low-confidence matches.
    """

    def __init__(self, graph: Graph, config: DescriptorConfig, match_median: Optional[float] = None, loss_history: Optional[list] = None):
        self.graph = graph
        self.config = config
        self.match_median = match_median
        self.loss_history = list(loss_history or [])

    @staticmethod
    def initialize(config: DescriptorConfig, seed: int) -> "DescriptorModel":
        return DescriptorModel(build_descriptor_graph(config, make_rng(seed, "descriptor_init")), config)

    def describe_batch(self, images: np.ndarray) -> np.ndarray:
        """
        (N, H, W, 3) images in [0, 1] -> (N, H, W, D) descriptors.
        """
        images = np.asarray(images, dtype=np.float64)
        out = self.graph.forward({"image": images.transpose(0, 3, 1, 2)}, ["descriptors"])["descriptors"]
        return out.transpose(0, 2, 3, 1)

    def describe(self, image: np.ndarray) -> np.ndarray:
        return self.describe_batch(np.asarray(image)[None])[0]

    def save(self, directory: Union[str, Path]) -> Path:
        metadata = {
            "kind": "descriptor",
            "config": _plain(asdict(self.config)),
            "match_median": None if self.match_median is None else float(self.match_median),
            "loss_history": [float(v) for v in self.loss_history],
        }
        return save_checkpoint(self.graph, directory, metadata)

    @staticmethod
    def load(directory: Union[str, Path]) -> "DescriptorModel":
        graph, metadata = load_checkpoint(directory)
        if metadata.get("kind") != "descriptor":
            raise DatasetError(f"{directory} is not a descriptor checkpoint")
        cfg = dict(metadata["config"])
        cfg["channels"] = tuple(cfg["channels"])
        return DescriptorModel(graph, DescriptorConfig(**cfg), metadata.get("match_median"), metadata.get("loss_history"))


def _plain(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True, eq=False)
class TrainingPair:
    image_a: np.ndarray
    image_b: np.ndarray
    matches_a: np.ndarray
    matches_b: np.ndarray
    non_matches_a: np.ndarray
    non_matches_b: np.ndarray


def contrastive_loss(
    desc_a: np.ndarray,
    desc_b: np.ndarray,
    pair: TrainingPair,
    margin: float,
) -> tuple[float, np.ndarray, np.ndarray, dict]:
    """
    Pixelwise contrastive loss on two (H, W, D) descriptor images:
    mean ||a - b||^2 over matches plus mean max(0, M - ||a - b||)^2 over non-matches.
    Pixel arrays are integer (u, v). Returns the loss, its gradients with respect to both
    descriptor images and match statistics.
    """
    grad_a = np.zeros_like(desc_a)
    grad_b = np.zeros_like(desc_b)
    ma, mb = pair.matches_a, pair.matches_b
    diff = desc_a[ma[:, 1], ma[:, 0]] - desc_b[mb[:, 1], mb[:, 0]]
    n_m = max(len(ma), 1)
    match_loss = float(np.sum(diff * diff)) / n_m
    np.add.at(grad_a, (ma[:, 1], ma[:, 0]), 2.0 * diff / n_m)
    np.add.at(grad_b, (mb[:, 1], mb[:, 0]), -2.0 * diff / n_m)

    na, nb = pair.non_matches_a, pair.non_matches_b
    non_match_loss = 0.0
    non_dist = np.zeros(0)
    if len(na):
        ndiff = desc_a[na[:, 1], na[:, 0]] - desc_b[nb[:, 1], nb[:, 0]]
        non_dist = np.linalg.norm(ndiff, axis=1)
        hinge = np.maximum(0.0, margin - non_dist)
        n_n = len(na)
        non_match_loss = float(np.sum(hinge * hinge)) / n_n
        active = (hinge > 0) & (non_dist > 1e-12)
        coef = np.zeros_like(non_dist)
        coef[active] = -2.0 * hinge[active] / non_dist[active] / n_n
        g = coef[:, None] * ndiff
        np.add.at(grad_a, (na[:, 1], na[:, 0]), g)
        np.add.at(grad_b, (nb[:, 1], nb[:, 0]), -g)

    stats = {
        "match_loss": match_loss,
        "non_match_loss": non_match_loss,
        "match_distance": float(np.mean(np.linalg.norm(diff, axis=1))) if len(ma) else 0.0,
        "non_match_distance": float(np.mean(non_dist)) if len(non_dist) else 0.0,
    }
    return match_loss + non_match_loss, grad_a, grad_b, stats


def sample_training_pair(views: Sequence[RenderedView], rng: np.random.Generator, config: DescriptorConfig, max_tries: int = 20) -> Optional[TrainingPair]:
    """
    Pick two distinct views of one scene, keep valid correspondences as matches and pair
    each matched pixel of A with an on-object pixel of B at least `non_match_min_distance`
    pixels away from its true match.
    """
    if len(views) < 2:
        raise DatasetError("a scene needs at least 2 views")
    for _ in range(max_tries):
        ia, ib = rng.choice(len(views), size=2, replace=False)
        a, b = views[ia], views[ib]
        pairs = [c for c in correspondences(a, b, 2 * config.n_matches, rng) if c.valid]
        if not pairs:
            continue
        pairs = pairs[: config.n_matches]
        ma = np.array([c.pixel_a for c in pairs], dtype=np.int64)
        mb = np.array([np.round(c.pixel_b) for c in pairs], dtype=np.int64)

        rows, cols = np.nonzero(b.mask != BACKGROUND_ID)
        on_b = np.stack([cols, rows], axis=1)
        na, nb = [], []
        if config.n_non_matches > 0:
            for k in rng.integers(0, len(ma), size=config.n_non_matches):
                far = np.linalg.norm(on_b - mb[k], axis=1) >= config.non_match_min_distance
                if not np.any(far):
                    continue
                candidates = on_b[far]
                na.append(ma[k])
                nb.append(candidates[rng.integers(0, len(candidates))])
        return TrainingPair(
            a.features,
            b.features,
            ma,
            mb,
            np.array(na, dtype=np.int64).reshape(-1, 2),
            np.array(nb, dtype=np.int64).reshape(-1, 2),
        )
    return None


def train_step(model: DescriptorModel, optimizer: Adam, pair: TrainingPair) -> tuple[float, dict]:
    desc = model.describe_batch(np.stack([pair.image_a, pair.image_b]))
    loss, grad_a, grad_b, stats = contrastive_loss(desc[0], desc[1], pair, model.config.margin)
    grad = np.stack([grad_a, grad_b]).transpose(0, 3, 1, 2)
    grads = model.graph.backward("descriptors", grad)
    optimizer.step(grads)
    return loss, stats


def _scenes(dataset) -> list[list[RenderedView]]:
    scenes = []
    for entry in dataset:
        views = entry[1] if isinstance(entry, tuple) else entry
        if len(views) >= 2:
            scenes.append(list(views))
    return scenes


def median_match_distance(model: DescriptorModel, scenes: list[list[RenderedView]], rng: np.random.Generator, n_pairs: int = 8) -> float:
    distances = []
    for _ in range(n_pairs):
        views = scenes[rng.integers(0, len(scenes))]
        pair = sample_training_pair(views, rng, model.config)
        if pair is None:
            continue
        desc = model.describe_batch(np.stack([pair.image_a, pair.image_b]))
        a = desc[0][pair.matches_a[:, 1], pair.matches_a[:, 0]]
        b = desc[1][pair.matches_b[:, 1], pair.matches_b[:, 0]]
        distances.append(np.linalg.norm(a - b, axis=1))
    if not distances:
        return float("nan")
    return float(np.median(np.concatenate(distances)))


def train_descriptors(dataset, config: DescriptorConfig, seed: int = 0, observer=None) -> DescriptorModel:
    """
    Train a descriptor model on a multi-view dataset: a sequence of scenes, each a list of
    rendered views (or (scene, views) tuples). One image pair per optimizer step.
    """
    scenes = _scenes(dataset)
    if not scenes:
        raise DatasetError("dataset has no scene with at least 2 views")
    rng = make_rng(seed, "descriptor_train")
    model = DescriptorModel.initialize(config, seed)
    optimizer = Adam(model.graph.parameters(), lr=config.lr, max_grad_norm=config.max_grad_norm)

    with ctrl_c_handler() as interrupted:
        for step in range(config.steps):
            if interrupted:
                logger.warning("descriptor training interrupted at step %d", step)
                break
            pair = sample_training_pair(scenes[rng.integers(0, len(scenes))], rng, config)
            if pair is None:
                logger.warning("no valid correspondences for sampled views at step %d", step)
                continue
            loss, stats = train_step(model, optimizer, pair)
            model.loss_history.append(loss)
            if observer is not None:
                observer.on_update_finished(step, dict(loss=loss, **stats))
            if step % config.log_every == 0:
                logger.info(
                    "step %d: loss %.4f (match %.3f, non-match %.3f)",
                    step, loss, stats["match_distance"], stats["non_match_distance"],
                )
    model.match_median = median_match_distance(model, scenes, rng)
    logger.info("training-set median match distance %.4f", model.match_median)
    return model


# ---------------------------------------------------------------------------
# reference annotation


@dataclass(frozen=True, eq=False)
class ReferenceAnnotation:
    image_id: str
    family: TaskFamily
    pixels: np.ndarray
    labels: tuple
    camera: CameraModel
    features: np.ndarray
    depth: np.ndarray

    def __post_init__(self):
        if len(self.pixels) != len(self.labels):
            raise KeypointError("one label per reference pixel is required")


def annotate_reference(scene: SceneModel, view: RenderedView, image_id: str = "reference") -> ReferenceAnnotation:
    """
    Project the scene's semantic keypoints into `view`. Every keypoint must land on an
    object pixel whose depth agrees with the keypoint's, otherwise DatasetError.
    """
    keypoints = np.stack(scene.semantic_keypoints())
    uv, z = project_points(keypoints, view.camera)
    H, W = view.shape
    pixels = np.round(uv).astype(np.int64)
    for k, ((u, v), zk) in enumerate(zip(pixels, z)):
        if not (zk > 0 and 0 <= u < W and 0 <= v < H):
            raise DatasetError(f"keypoint {k} projects outside the reference view")
        if view.mask[v, u] == BACKGROUND_ID or abs(view.depth[v, u] - zk) > VISIBILITY_TOLERANCE:
            raise DatasetError(f"keypoint {k} is not visible in the reference view")
    return ReferenceAnnotation(
        image_id, scene.family, pixels, KEYPOINT_LABELS[scene.family], view.camera, view.features, view.depth
    )


def choose_reference_view(scene: SceneModel, rng: np.random.Generator, config: RenderConfig = RenderConfig(), max_tries: int = 50) -> tuple[RenderedView, ReferenceAnnotation]:
    for _ in range(max_tries):
        cam = sample_cameras(scene_focus(scene), 1, rng, config)[0]
        view = render_view(scene, cam)
        try:
            return view, annotate_reference(scene, view)
        except DatasetError:
            continue
    raise DatasetError(f"no reference view shows all {scene.family.value} keypoints after {max_tries} tries")


def save_annotation(annotation: ReferenceAnnotation, directory: Union[str, Path]) -> Path:
    directory = ensure_dir(directory)
    stem = directory / annotation.image_id
    np.savez_compressed(stem.with_suffix(".npz"), features=annotation.features, depth=annotation.depth)
    cv2.imwrite(str(stem.with_suffix(".png")), to_bgr8(annotation.features))
    path = directory / "annotation.yaml"
    with open(path, "w") as f:
        yaml.safe_dump(
            {
                "family": annotation.family.value,
                "image": f"{annotation.image_id}.png",
                "data": f"{annotation.image_id}.npz",
                "camera": annotation.camera.to_dict(),
                "keypoints": [
                    {"label": label, "pixel": [int(p[0]), int(p[1])]}
                    for label, p in zip(annotation.labels, annotation.pixels)
                ],
            },
            f,
            sort_keys=False,
        )
    return path


def load_annotation(path: Union[str, Path]) -> ReferenceAnnotation:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with open(path) as f:
        record = yaml.safe_load(f)
    family = TaskFamily(record["family"])
    keypoints = record["keypoints"]
    if len(keypoints) != KEYPOINT_COUNTS[family]:
        raise KeypointError(f"{path}: {family.value} needs {KEYPOINT_COUNTS[family]} keypoints, got {len(keypoints)}")
    with np.load(path.parent / record["data"]) as data:
        features, depth = data["features"], data["depth"]
    return ReferenceAnnotation(
        image_id=Path(record["image"]).stem,
        family=family,
        pixels=np.array([k["pixel"] for k in keypoints], dtype=np.int64),
        labels=tuple(k["label"] for k in keypoints),
        camera=CameraModel.from_dict(record["camera"]),
        features=features,
        depth=depth,
    )


# ---------------------------------------------------------------------------
# matching


@dataclass(frozen=True, eq=False)
class KeypointSet:
    pixels: np.ndarray
    distances: np.ndarray
    targets: np.ndarray = field(default=None)
    valid: np.ndarray = field(default=None)
    low_confidence: np.ndarray = field(default=None)

    def __len__(self) -> int:
        return len(self.pixels)

    def target_list(self) -> list[np.ndarray]:
        if self.targets is None or not np.all(self.valid):
            bad = [] if self.valid is None else np.nonzero(~self.valid)[0].tolist()
            raise KeypointError(f"keypoints without a 3D target: {bad}")
        return [t.copy() for t in self.targets]


def match_descriptors(reference: np.ndarray, desc_image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """
    Nearest neighbor of each (K, D) reference descriptor over an (H, W, D) image.
    Ties resolve to the first pixel in row-major order. Returns (K, 2) (u, v) pixels and
    the (K,) distances.
    """
    H, W, D = desc_image.shape
    flat = desc_image.reshape(-1, D)
    d2 = np.sum((flat[None, :, :] - reference[:, None, :]) ** 2, axis=-1)
    idx = np.argmin(d2, axis=1)
    pixels = np.stack([idx % W, idx // W], axis=1)
    return pixels, np.sqrt(d2[np.arange(len(reference)), idx])


def reference_descriptors(model: DescriptorModel, annotation: ReferenceAnnotation) -> np.ndarray:
    desc = model.describe(annotation.features)
    return desc[annotation.pixels[:, 1], annotation.pixels[:, 0]]


def match_keypoints(model: DescriptorModel, annotation: ReferenceAnnotation, image: np.ndarray) -> KeypointSet:
    image = np.asarray(image)
    if image.shape[:2] != annotation.features.shape[:2]:
        logger.warning("matching a %s image against a %s reference", image.shape[:2], annotation.features.shape[:2])
    pixels, distances = match_descriptors(reference_descriptors(model, annotation), model.describe(image))
    if model.match_median is not None and np.isfinite(model.match_median):
        low = distances > model.config.confidence_factor * model.match_median
    else:
        low = np.zeros(len(distances), dtype=bool)
    for k in np.nonzero(low)[0]:
        logger.warning(
            "low-confidence match for %s: distance %.4f > %.1f x median %.4f",
            annotation.labels[k], distances[k], model.config.confidence_factor, model.match_median,
        )
    return KeypointSet(pixels, distances, low_confidence=low)


def _nearest_valid_pixel(pixel: np.ndarray, depth: np.ndarray) -> Optional[np.ndarray]:
    rows, cols = np.nonzero(depth > 0)
    if rows.size == 0:
        return None
    d2 = (cols - pixel[0]) ** 2 + (rows - pixel[1]) ** 2
    k = int(np.argmin(d2))
    return np.array([cols[k], rows[k]])


def keypoints_to_targets(pixels: np.ndarray, depth: np.ndarray, cam: CameraModel, fallback: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """
    Back-project (u, v) pixels with the depth image. Background pixels are flagged invalid
    (NaN target) unless `fallback` is set, in which case the nearest pixel with valid
    depth is used instead.
    """
    pixels = np.asarray(pixels)
    targets = np.full((len(pixels), 3), np.nan)
    valid = np.zeros(len(pixels), dtype=bool)
    for k, p in enumerate(pixels):
        u, v = int(p[0]), int(p[1])
        try:
            targets[k] = backproject_pixel((u, v), float(depth[v, u]), cam)
            valid[k] = True
            continue
        except (GeometryError, IndexError):
            pass
        if fallback:
            alt = _nearest_valid_pixel(np.array([u, v]), depth)
            if alt is not None:
                logger.warning("keypoint %d at (%d, %d) has no depth; using (%d, %d)", k, u, v, alt[0], alt[1])
                targets[k] = backproject_pixel(alt, float(depth[alt[1], alt[0]]), cam)
                valid[k] = True
                continue
        logger.warning("keypoint %d at (%d, %d) is on background", k, u, v)
    return targets, valid


def locate_keypoints(model: DescriptorModel, annotation: ReferenceAnnotation, view: RenderedView, fallback: bool = True) -> KeypointSet:
    """
    Match the annotation into `view` and lift the matches to world-frame targets.
    """
    matched = match_keypoints(model, annotation, view.features)
    targets, valid = keypoints_to_targets(matched.pixels, view.depth, view.camera, fallback=fallback)
    return KeypointSet(matched.pixels, matched.distances, targets, valid, matched.low_confidence)


def transfer_accuracy(model: DescriptorModel, annotation: ReferenceAnnotation, scene: SceneModel, views: Sequence[RenderedView], tolerance_px: float = 3.0) -> float:
    """
    Fraction of keypoints matched within `tolerance_px` of the projection of the scene's
    ground-truth semantic keypoints, over views where that keypoint is visible.
    """
    truth = np.stack(scene.semantic_keypoints())
    ref = reference_descriptors(model, annotation)
    hits, total = 0, 0
    for view in views:
        uv, z = project_points(truth, view.camera)
        pixels, _ = match_descriptors(ref, model.describe(view.features))
        H, W = view.shape
        for k in range(len(truth)):
            u, v = np.round(uv[k]).astype(int)
            if not (z[k] > 0 and 0 <= u < W and 0 <= v < H):
                continue
            if view.mask[v, u] == BACKGROUND_ID or abs(view.depth[v, u] - z[k]) > VISIBILITY_TOLERANCE:
                continue
            total += 1
            hits += int(np.linalg.norm(pixels[k] - uv[k]) <= tolerance_px)
    return hits / total if total else float("nan")


def draw_matches(image: np.ndarray, keypoints: KeypointSet, labels: Sequence[str]) -> np.ndarray:
    canvas = to_bgr8(image)
    canvas = cv2.resize(canvas, None, fx=4, fy=4, interpolation=cv2.INTER_NEAREST)
    for k, (u, v) in enumerate(keypoints.pixels):
        color = (0, 0, 255) if keypoints.low_confidence is not None and keypoints.low_confidence[k] else (0, 255, 0)
        center = (int(u) * 4 + 2, int(v) * 4 + 2)
        cv2.circle(canvas, center, 5, color, 1)
        cv2.putText(canvas, labels[k], (center[0] + 6, center[1] - 6), cv2.FONT_HERSHEY_SIMPLEX, 0.35, color, 1)
    return canvas
