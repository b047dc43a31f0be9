"""Synthetic toy scenes: ground-truth Gaussian sets rendered into posed
datasets.  These power the test suite, the acceptance runs, and the
level/budget benchmark, standing in for the large-scale captures the
engine ultimately targets.
"""

from __future__ import annotations

import numpy as np

from . import geom, nets, scene, splat
from .dataio import Dataset
from .geom import Camera
from .nets import Embeddings
from .scene import GaussianPyramid, SceneModel
from .splat import WeightingMode


def look_at_camera(
    eye, target, width: int = 128, height: int = 128,
    fov_y: float = 0.8, up=(0.0, 1.0, 0.0), index: int = -1,
) -> Camera:
    """Camera at `eye` looking toward `target` (OpenGL-style, -z forward)."""
    eye = np.asarray(eye, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - eye
    f = f / np.linalg.norm(f)
    up = np.asarray(up, dtype=np.float64)
    if abs(np.dot(f, up)) > 0.999:  # degenerate up vector
        up = np.array([1.0, 0.0, 0.0])
    s = np.cross(f, up)
    s = s / np.linalg.norm(s)
    u = np.cross(s, f)
    w2c = np.eye(4)
    w2c[:3, :3] = np.stack([s, u, -f])
    w2c[:3, 3] = -w2c[:3, :3] @ eye
    fy = height / (2.0 * np.tan(0.5 * fov_y))
    return Camera(
        w2c=w2c, fx=fy, fy=fy, cx=width / 2.0, cy=height / 2.0,
        width=width, height=height, index=index,
    )


def orbit_cameras(
    n: int, radius: float = 4.0, target=(0.0, 0.0, 0.0),
    width: int = 128, height: int = 128, fov_y: float = 0.8,
    elevation_range=(-0.5, 0.7), radius_jitter: float = 0.0,
    seed: int = 0,
) -> list[Camera]:
    """Cameras on a spiral around the target, all looking inward."""
    rng = np.random.default_rng(seed)
    cams = []
    target = np.asarray(target, dtype=np.float64)
    for i in range(n):
        azim = 2.0 * np.pi * i / n * 3.0  # three turns for pose variety
        elev = elevation_range[0] + (elevation_range[1] - elevation_range[0]) * (
            (i + 0.5) / n
        )
        r = radius * (1.0 + radius_jitter * (rng.random() * 2.0 - 1.0))
        eye = target + r * np.array(
            [np.cos(azim) * np.cos(elev), np.sin(elev), np.sin(azim) * np.cos(elev)]
        )
        cams.append(look_at_camera(eye, target, width, height, fov_y, index=i))
    return cams


def _model_from_arrays(
    positions, quats, log_scales, logits, sh, levels, clusters,
    n_levels, n_clusters, aabb, seed=0,
) -> SceneModel:
    rng = np.random.default_rng(seed)
    gaussians = GaussianPyramid(
        positions=positions, quaternions=quats, log_scales=log_scales,
        opacity_logits=logits, sh=sh,
        levels=levels.astype(np.uint8), clusters=clusters.astype(np.int32),
    )
    centroids = rng.uniform(aabb[0], aabb[1], size=(n_clusters, 3))
    extent = float(np.linalg.norm(aabb[1] - aabb[0]))
    return SceneModel(
        gaussians=gaussians,
        centroids=centroids,
        embeddings=Embeddings.create(n_clusters, 1, rng=rng),
        weight_net=nets.make_weighting_net(n_levels, rng=rng),
        correction_net=nets.make_correction_net(rng=rng),
        n_levels=n_levels,
        aabb=np.asarray(aabb, dtype=np.float64),
        scene_extent=extent,
    )


def random_scene_model(
    rng: np.random.Generator,
    n_gaussians: int = 50,
    n_levels: int = 3,
    n_clusters: int = 4,
    spread: float = 1.0,
    scale_range=(-3.5, -1.5),
) -> SceneModel:
    """A random scene for oracle/property tests (not meant to look like much)."""
    n = n_gaussians
    positions = rng.uniform(-spread, spread, size=(n, 3))
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    log_scales = rng.uniform(scale_range[0], scale_range[1], size=(n, 3))
    logits = rng.uniform(-2.0, 2.0, size=n)
    sh = np.zeros((n, 16, 3))
    sh[:, 0, :] = (rng.uniform(0.05, 0.95, size=(n, 3)) - 0.5) / geom.SH_C0
    sh[:, 1:, :] = rng.normal(0.0, 0.05, size=(n, 15, 3))
    levels = rng.integers(1, n_levels + 1, size=n)
    clusters = rng.integers(0, n_clusters, size=n)
    aabb = np.array([[-2.0 * spread] * 3, [2.0 * spread] * 3])
    return _model_from_arrays(
        positions, quats, log_scales, logits, sh, levels, clusters,
        n_levels, n_clusters, aabb, seed=int(rng.integers(0, 2**31)),
    )


def render_dataset(model: SceneModel, cameras: list[Camera],
                   mode: WeightingMode = WeightingMode.PLAIN) -> Dataset:
    """Render a ground-truth model from every camera into a Dataset."""
    images = []
    for cam in cameras:
        out, _ = scene.render_view(model, cam, mode=mode)
        images.append(out.image)
    return Dataset(images, cameras)


def make_toy_scene(n_gaussians: int = 500, seed: int = 0,
                   spread: float = 1.0) -> SceneModel:
    """Ground-truth scene: a blob of random opaque-ish Gaussians."""
    rng = np.random.default_rng(seed)
    n = n_gaussians
    positions = rng.normal(0.0, 0.45 * spread, size=(n, 3))
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    log_scales = rng.uniform(np.log(0.02), np.log(0.12), size=(n, 3))
    logits = rng.uniform(1.0, 3.0, size=n)  # mostly opaque
    sh = np.zeros((n, 16, 3))
    sh[:, 0, :] = (rng.uniform(0.1, 0.9, size=(n, 3)) - 0.5) / geom.SH_C0
    sh[:, 1:4, :] = rng.normal(0.0, 0.08, size=(n, 3, 3))
    levels = np.ones(n, dtype=np.uint8)
    clusters = np.zeros(n, dtype=np.int32)
    aabb = np.array([[-2.0, -2.0, -2.0], [2.0, 2.0, 2.0]]) * spread
    return _model_from_arrays(
        positions, quats, log_scales, logits, sh, levels, clusters,
        1, 1, aabb, seed=seed,
    )


def make_toy_dataset(
    n_gaussians: int = 500, n_poses: int = 64, size: int = 128, seed: int = 0,
) -> tuple[Dataset, SceneModel]:
    """The standard toy benchmark: a random Gaussian blob seen from an orbit."""
    gt = make_toy_scene(n_gaussians, seed=seed)
    cams = orbit_cameras(n_poses, radius=4.0, width=size, height=size, seed=seed)
    return render_dataset(gt, cams), gt


def make_multiscale_scene(seed: int = 0) -> SceneModel:
    """Fine texture up close, smooth geometry far away.

    A checker-textured card of many small Gaussians sits near the origin;
    a broad smooth backdrop of few large Gaussians sits well behind it.
    """
    rng = np.random.default_rng(seed)
    parts = []

    # near card: dense grid of small Gaussians with alternating colors
    n_grid = 24
    xs = np.linspace(-0.9, 0.9, n_grid)
    gx, gy = np.meshgrid(xs, xs)
    pos_near = np.stack(
        [gx.ravel(), gy.ravel(), rng.normal(0.0, 0.01, n_grid**2)], axis=1
    )
    checker = ((gx.ravel() * 8).astype(int) + (gy.ravel() * 8).astype(int)) % 2
    col_near = np.where(
        checker[:, None] > 0,
        np.array([0.9, 0.15, 0.1]),
        np.array([0.95, 0.9, 0.85]),
    )
    col_near = np.clip(col_near + rng.normal(0.0, 0.03, col_near.shape), 0.02, 0.98)
    n1 = pos_near.shape[0]
    parts.append((pos_near, col_near, np.full(n1, np.log(0.045)), np.full(n1, 3.0)))

    # far backdrop: large smooth color ramp
    n_back = 60
    bx = rng.uniform(-4.0, 4.0, n_back)
    by = rng.uniform(-3.0, 3.0, n_back)
    pos_far = np.stack([bx, by, np.full(n_back, -6.0) + rng.normal(0, 0.1, n_back)], 1)
    ramp = (bx + 4.0) / 8.0
    col_far = np.stack([0.15 + 0.2 * ramp, 0.3 + 0.3 * ramp, 0.65 - 0.3 * ramp], 1)
    parts.append((pos_far, col_far, np.full(n_back, np.log(0.8)), np.full(n_back, 3.5)))

    positions = np.concatenate([p[0] for p in parts])
    colors = np.concatenate([p[1] for p in parts])
    log_s = np.concatenate([p[2] for p in parts])
    logits = np.concatenate([p[3] for p in parts])
    n = positions.shape[0]
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    sh = np.zeros((n, 16, 3))
    sh[:, 0, :] = (colors - 0.5) / geom.SH_C0
    aabb = np.array([[-5.0, -4.0, -8.0], [5.0, 4.0, 3.0]])
    return _model_from_arrays(
        positions, quats, np.repeat(log_s[:, None], 3, axis=1), logits, sh,
        np.ones(n), np.zeros(n), 1, 1, aabb, seed=seed,
    )


def make_multiscale_dataset(
    n_poses: int = 48, size: int = 128, seed: int = 0
) -> tuple[Dataset, SceneModel]:
    """Poses sweep from close-ups of the textured card to wide views."""
    gt = make_multiscale_scene(seed=seed)
    rng = np.random.default_rng(seed + 1)
    cams = []
    for i in range(n_poses):
        frac = i / max(n_poses - 1, 1)
        dist = 1.2 + 3.4 * frac  # near to far
        azim = np.pi / 2 + 0.9 * np.sin(2.0 * np.pi * i / n_poses * 2.0)
        elev = 0.15 * np.cos(2.0 * np.pi * i / n_poses * 3.0)
        eye = np.array(
            [np.cos(azim) * np.cos(elev), np.sin(elev), np.sin(azim) * np.cos(elev)]
        ) * dist
        look = np.array([0.0, 0.0, -0.4 * (1.0 - frac) - 2.0 * frac])
        cams.append(look_at_camera(eye, look, size, size, fov_y=0.9, index=i))
    return render_dataset(gt, cams), gt


def apply_exposure_jitter(
    dataset: Dataset, indices: list[int], gain_range: float = 0.2, seed: int = 0
) -> Dataset:
    """Scale selected images by per-image gains in [1-g, 1+g] (clipped)."""
    rng = np.random.default_rng(seed)
    images = [img.copy() for img in dataset.images]
    for i in indices:
        gain = 1.0 + gain_range * (2.0 * rng.random() - 1.0)
        images[i] = np.clip(images[i] * gain, 0.0, 1.0)
    return Dataset(images, dataset.cameras)
