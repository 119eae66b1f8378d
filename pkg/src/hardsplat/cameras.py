"""Pinhole cameras, scenes, synthetic scene generation, seed-point init.

Synthetic scenes replace SfM ingestion at desk scale: a ground-truth
Gaussian cloud is sampled, cameras are placed on a ring looking at the
origin, and ground-truth images are rendered with the package's own
renderer, so every training target has an exact generative model.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import InvalidSceneSpecError
from .gaussians import GaussianCloud, load_cloud, logit, save_cloud
from .imgio import load_png, save_png

NEAR_PLANE = 0.01


@dataclass
class Camera:
    """Pinhole view: intrinsics in pixels, world-to-camera extrinsics."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray  # (3, 3) world-to-camera
    translation: np.ndarray  # (3,)
    view_id: int

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 8 or self.height < 8:
            raise ValueError("image must be at least 8x8")
        if np.max(np.abs(self.rotation.T @ self.rotation - np.eye(3))) > 1e-9:
            raise ValueError("rotation is not orthonormal")

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation


def project_point(camera: Camera, x: np.ndarray):
    """Project a world point: returns (pixel (2,), depth, visible).

    visible is False for points at or behind the near plane; the pixel is
    still returned (it is meaningless there but never an error).
    """
    x_cam = camera.rotation @ np.asarray(x, dtype=np.float64) + camera.translation
    depth = float(x_cam[2])
    visible = depth > NEAR_PLANE
    z = x_cam[2] if visible else max(x_cam[2], NEAR_PLANE)
    pixel = np.array([
        camera.fx * x_cam[0] / z + camera.cx,
        camera.fy * x_cam[1] / z + camera.cy,
    ])
    return pixel, depth, visible


@dataclass
class Scene:
    """Immutable set of posed views with ground-truth images."""

    cameras: list[Camera]
    gt_images: list[np.ndarray]
    split: list[str]  # "train" | "test" per camera
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    extent: float = 0.0

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)
        if not (len(self.cameras) == len(self.gt_images) == len(self.split)):
            raise ValueError("cameras, images and split must align")
        ids = [c.view_id for c in self.cameras]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate view_id in scene")
        for cam, img in zip(self.cameras, self.gt_images):
            if img.shape != (cam.height, cam.width, 3):
                raise ValueError(f"image shape {img.shape} does not match view {cam.view_id}")
        if sum(s == "train" for s in self.split) < 2:
            raise ValueError("scene needs at least 2 train views")
        if self.extent <= 0:
            self.extent = scene_extent(self.cameras)

    def indices(self, split: str) -> list[int]:
        return [i for i, s in enumerate(self.split) if s == split]

    @property
    def train_indices(self) -> list[int]:
        return self.indices("train")

    @property
    def test_indices(self) -> list[int]:
        return self.indices("test")


def scene_extent(cameras: list[Camera]) -> float:
    """Radius of the camera-center bounding sphere (about the centroid)."""
    centers = np.stack([c.center for c in cameras])
    centroid = centers.mean(axis=0)
    return float(np.max(np.linalg.norm(centers - centroid, axis=1)))


@dataclass
class SceneSpec:
    """Parameters for deterministic synthetic scene generation.

    The defaults define the package's standard desk-scale benchmark scene;
    600 ground-truth Gaussians keep reconstruction capacity-bound well past
    the point where the densification policies stop growing."""

    views: int = 16
    width: int = 64
    height: int = 64
    gaussians: int = 600
    ring_radius: float = 4.0
    elevation: float = 0.35  # radians above the equator
    focal_factor: float = 1.5  # fx = fy = focal_factor * width
    test_every: int = 4  # every k-th view goes to the test split
    background: tuple = (0.0, 0.0, 0.0)

    def validate(self):
        if self.gaussians <= 0:
            raise InvalidSceneSpecError("need at least one ground-truth gaussian")
        if self.views < 3:
            raise InvalidSceneSpecError("need at least 3 cameras")
        if self.ring_radius <= 1.0:
            raise InvalidSceneSpecError("ring radius must exceed the unit content ball")


def _look_at_origin(center: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """World-to-camera rotation/translation for a camera looking at the origin."""
    z = -center / np.linalg.norm(center)  # camera forward (+z toward scene)
    up = np.array([0.0, 0.0, 1.0])
    x = np.cross(up, z)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])  # rows
    t = -R @ center
    return R, t


def _sample_unit_ball(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    r = rng.uniform(0.0, 1.0, size=n) ** (1.0 / 3.0)
    return v * r[:, None]


def sample_ground_truth_cloud(spec: SceneSpec, rng: np.random.Generator) -> GaussianCloud:
    g = spec.gaussians
    means = _sample_unit_ball(rng, g)
    # Scales near the typical inter-point spacing so splats overlap mildly.
    spacing = 1.6 * g ** (-1.0 / 3.0)
    log_scales = np.log(rng.uniform(0.35 * spacing, 0.9 * spacing, size=(g, 3)))
    rotations = rng.normal(size=(g, 4))
    rotations /= np.linalg.norm(rotations, axis=1, keepdims=True)
    raw_opacities = logit(rng.uniform(0.5, 0.95, size=g))
    colors = rng.uniform(0.05, 0.95, size=(g, 3))
    return GaussianCloud(means, log_scales, rotations, raw_opacities, colors)


def gen_synthetic(spec: SceneSpec, seed: int) -> tuple[Scene, GaussianCloud]:
    """Deterministic synthetic scene plus the ground-truth cloud behind it."""
    from .renderer import render_view  # local import to avoid a module cycle

    spec.validate()
    rng = np.random.default_rng(seed)
    gt_cloud = sample_ground_truth_cloud(spec, rng)

    cameras = []
    split = []
    for k in range(spec.views):
        phi = 2.0 * np.pi * k / spec.views
        center = spec.ring_radius * np.array([
            np.cos(phi) * np.cos(spec.elevation),
            np.sin(phi) * np.cos(spec.elevation),
            np.sin(spec.elevation),
        ])
        R, t = _look_at_origin(center)
        cameras.append(Camera(
            fx=spec.focal_factor * spec.width, fy=spec.focal_factor * spec.width,
            cx=spec.width / 2.0, cy=spec.height / 2.0,
            width=spec.width, height=spec.height,
            rotation=R, translation=t, view_id=k,
        ))
        is_test = spec.test_every > 0 and (k % spec.test_every == spec.test_every - 1)
        split.append("test" if is_test else "train")

    background = np.asarray(spec.background, dtype=np.float64)
    gt_images = [render_view(gt_cloud, cam, background).image for cam in cameras]
    scene = Scene(cameras, gt_images, split, background=background)
    return scene, gt_cloud


def _knn_mean_distance(points: np.ndarray, k: int = 3) -> np.ndarray:
    """Mean distance from each point to its k nearest other points."""
    n = points.shape[0]
    if n == 1:
        return np.ones(1)
    kk = min(k, n - 1)
    tree = cKDTree(points)
    dist, _ = tree.query(points, k=kk + 1)  # self comes back at distance 0
    return dist[:, 1:].mean(axis=1)


def init_cloud(scene: Scene, count: int, mode: str, seed: int,
               gt_cloud: GaussianCloud | None = None) -> GaussianCloud:
    """Seed cloud for optimization.

    gt-subsample perturbs a random subset of ground-truth means
    (sigma = 0.05 * extent) and paints them gray; random-ball samples
    uniformly inside the scene bounding sphere (camera centroid, radius
    extent). Scales start isotropic at the mean 3-NN distance, opacity 0.1.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    if mode == "gt-subsample":
        if gt_cloud is None:
            raise ValueError("gt-subsample needs the ground-truth cloud")
        if count > len(gt_cloud):
            raise ValueError(f"count {count} exceeds the {len(gt_cloud)} ground-truth points")
        picks = rng.choice(len(gt_cloud), size=count, replace=False)
        means = gt_cloud.means[picks] + rng.normal(scale=0.05 * scene.extent, size=(count, 3))
    elif mode == "random-ball":
        centers = np.stack([c.center for c in scene.cameras])
        means = centers.mean(axis=0) + scene.extent * _sample_unit_ball(rng, count)
    else:
        raise ValueError(f"unknown init mode {mode!r}")

    log_scales = np.repeat(np.log(_knn_mean_distance(means))[:, None], 3, axis=1)
    rotations = np.zeros((count, 4))
    rotations[:, 0] = 1.0
    raw_opacities = np.full(count, float(logit(0.1)))
    colors = np.full((count, 3), 0.5)
    return GaussianCloud(means, log_scales, rotations, raw_opacities, colors)


# --- scene directory format -------------------------------------------------

GT_CLOUD_FILENAME = "ground_truth.hgscloud"


def save_scene(scene: Scene, path, gt_cloud: GaussianCloud | None = None) -> None:
    """Write cameras.json plus images/<view_id>.png (8-bit sRGB)."""
    path = Path(path)
    (path / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for cam, split in zip(scene.cameras, scene.split):
        entries.append({
            "view_id": cam.view_id,
            "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "width": cam.width, "height": cam.height,
            "rotation": [float(v) for v in cam.rotation.reshape(-1)],
            "translation": [float(v) for v in cam.translation],
            "split": split,
        })
    with open(path / "cameras.json", "w") as f:
        json.dump(entries, f, indent=1)
    for cam, img in zip(scene.cameras, scene.gt_images):
        save_png(path / "images" / f"{cam.view_id}.png", img)
    if gt_cloud is not None:
        save_cloud(gt_cloud, path / GT_CLOUD_FILENAME)


def load_scene(path, background=(0.0, 0.0, 0.0)) -> Scene:
    path = Path(path)
    with open(path / "cameras.json") as f:
        entries = json.load(f)
    cameras, images, split = [], [], []
    for e in entries:
        cameras.append(Camera(
            fx=e["fx"], fy=e["fy"], cx=e["cx"], cy=e["cy"],
            width=e["width"], height=e["height"],
            rotation=np.asarray(e["rotation"]).reshape(3, 3),
            translation=np.asarray(e["translation"]),
            view_id=e["view_id"],
        ))
        images.append(load_png(path / "images" / f"{e['view_id']}.png"))
        split.append(e["split"])
    return Scene(cameras, images, split, background=np.asarray(background, dtype=np.float64))


def load_scene_gt_cloud(path) -> GaussianCloud | None:
    p = Path(path) / GT_CLOUD_FILENAME
    return load_cloud(p) if p.exists() else None
