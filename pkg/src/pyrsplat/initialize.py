"""Builds the pyramidal Gaussian scene from a trained coarse field.

Pipeline: cast rays from the training cameras and drop a point at each
estimated termination depth; draw one subset per pyramid level at sizes
growing linearly with the level index; turn each subset into Gaussians with
k-NN-derived isotropic scales; cluster the dense cloud with mini-batch
k-means and tag every Gaussian with its nearest centroid.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.spatial import cKDTree

from . import geom
from .errors import NumericalError
from .field import VoxelField, estimate_terminations, intersect_aabb
from .scene import GaussianPyramid, N_SH_COEFFS

INIT_OPACITY = 0.1
SCALE_CLAMP_LO = 1e-6
SCALE_CLAMP_FRAC = 0.1  # max initial scale as a fraction of scene extent
MIN_TERMINATION_RATE = 0.01
RAY_BUDGET_FACTOR = 10


@dataclass
class PointCloud:
    """Positions and linear-RGB colors sampled from the coarse field."""

    positions: np.ndarray  # (N, 3)
    colors: np.ndarray     # (N, 3) in [0, 1]

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    def extent(self) -> float:
        """Diagonal length of the cloud's bounding box."""
        span = self.positions.max(axis=0) - self.positions.min(axis=0)
        return float(np.linalg.norm(span))


@dataclass
class PyramidSpec:
    """Level count and per-level subset sizes, N_l = l * N_1 exactly."""

    n_levels: int = 3
    n_base: int = 100_000

    @property
    def sizes(self) -> list[int]:
        return [lvl * self.n_base for lvl in range(1, self.n_levels + 1)]

    @property
    def total(self) -> int:
        return sum(self.sizes)


@dataclass
class ClusterTable:
    """K-means centroids over point positions."""

    centroids: np.ndarray  # (K, 3)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]


@dataclass
class KMeansConfig:
    batch_size: int = 8192
    iterations: int = 100
    subset_cap: int = 100_000
    full_batch: bool = False  # run classic Lloyd instead of mini-batch
    lloyd_iterations: int = 50
    seed: int = 0


def generate_point_cloud(
    f: VoxelField,
    cameras,
    target: int,
    seed: int = 0,
    n_samples: int = 128,
    chunk: int = 16384,
) -> PointCloud:
    """Sample `target` surface points by casting random camera rays.

    Rays are drawn uniformly over (camera, pixel) pairs; each terminating ray
    contributes the point o + z_hat * d colored by the field query there.
    Fails if almost nothing terminates within a 10x ray budget.
    """
    if len(cameras) == 0:
        raise ValueError("point generation needs at least one camera")
    rng = np.random.default_rng(seed)
    budget = RAY_BUDGET_FACTOR * target
    dir_cache: dict[int, np.ndarray] = {}
    pts, cols = [], []
    cast = 0
    collected = 0
    while collected < target and cast < budget:
        n = min(chunk, budget - cast)
        cast += n
        cam_idx = rng.integers(0, len(cameras), size=n)
        origins = np.empty((n, 3))
        dirs = np.empty((n, 3))
        for i in np.unique(cam_idx):
            sel = cam_idx == i
            cam = cameras[i]
            if i not in dir_cache:
                dir_cache[i] = cam.pixel_directions()
            k = int(sel.sum())
            py = rng.integers(0, cam.height, size=k)
            px = rng.integers(0, cam.width, size=k)
            origins[sel] = cam.center
            dirs[sel] = dir_cache[i][py, px]
        t_lo, t_hi, hit = intersect_aabb(origins, dirs, f.aabb)
        if not hit.any():
            continue
        origins, dirs = origins[hit], dirs[hit]
        t_lo, t_hi = t_lo[hit], t_hi[hit]
        z, ok = estimate_terminations(
            f, origins, dirs, t_lo, t_hi, n_samples=n_samples, rng=rng
        )
        if not ok.any():
            continue
        p = origins[ok] + z[ok, None] * dirs[ok]
        c, _ = f.query(p, dirs[ok])
        pts.append(p)
        cols.append(c)
        collected += int(ok.sum())
    if collected < max(1, int(MIN_TERMINATION_RATE * budget)) and collected < target:
        raise NumericalError(
            f"degenerate field: only {collected} of {cast} rays terminated"
        )
    positions = np.concatenate(pts)[:target]
    colors = np.clip(np.concatenate(cols)[:target], 0.0, 1.0)
    return PointCloud(positions, colors)


def sample_multiscale(
    cloud: PointCloud, spec: PyramidSpec, seed: int = 0
) -> list[PointCloud]:
    """One independent without-replacement subset per level, sizes spec.sizes."""
    if spec.sizes[-1] > cloud.count:
        raise ValueError(
            f"largest subset ({spec.sizes[-1]}) exceeds cloud size ({cloud.count})"
        )
    rng = np.random.default_rng(seed)
    subsets = []
    for size in spec.sizes:
        idx = rng.choice(cloud.count, size=size, replace=False)
        subsets.append(PointCloud(cloud.positions[idx], cloud.colors[idx]))
    return subsets


def init_gaussians_from_points(
    subset: PointCloud, level: int, scene_extent: float | None = None
) -> GaussianPyramid:
    """3DGS-style Gaussian initialization for one pyramid level.

    Isotropic log-scale from the mean distance to the 3 nearest neighbors
    within the subset, identity rotations, low starting opacity, and the
    point color folded into the constant SH band.
    """
    if subset.count == 0:
        raise ValueError("cannot initialize Gaussians from an empty subset")
    n = subset.count
    if scene_extent is None:
        scene_extent = max(subset.extent(), 1e-6)
    if n >= 4:
        tree = cKDTree(subset.positions)
        dist, _ = tree.query(subset.positions, k=4)
        mean_dist = dist[:, 1:].mean(axis=1)
    else:
        mean_dist = np.full(n, 0.01 * scene_extent)
    mean_dist = np.clip(mean_dist, SCALE_CLAMP_LO, SCALE_CLAMP_FRAC * scene_extent)
    log_scales = np.repeat(np.log(mean_dist)[:, None], 3, axis=1)

    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    sh = np.zeros((n, N_SH_COEFFS, 3))
    sh[:, 0, :] = (subset.colors - 0.5) / geom.SH_C0
    logits = np.full(n, np.log(INIT_OPACITY / (1.0 - INIT_OPACITY)))
    return GaussianPyramid(
        positions=subset.positions.copy(),
        quaternions=quats,
        log_scales=log_scales,
        opacity_logits=logits,
        sh=sh,
        levels=np.full(n, level, dtype=np.uint8),
        clusters=np.zeros(n, dtype=np.int32),
    )


def build_pyramid(
    subsets: list[PointCloud], scene_extent: float | None = None
) -> GaussianPyramid:
    """Initialize and stack all levels (level 1 first)."""
    parts = [
        init_gaussians_from_points(s, lvl + 1, scene_extent)
        for lvl, s in enumerate(subsets)
    ]
    return GaussianPyramid.concatenate(parts)


def _kmeans_pp_seed(points: np.ndarray, k: int, rng: np.random.Generator):
    """k-means++ seeding: spread initial centroids by squared distance."""
    n = points.shape[0]
    centroids = np.empty((k, 3))
    centroids[0] = points[rng.integers(0, n)]
    d2 = np.sum((points - centroids[0]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            centroids[i:] = points[rng.integers(0, n, size=k - i)]
            break
        probs = d2 / total
        centroids[i] = points[rng.choice(n, p=probs)]
        d2 = np.minimum(d2, np.sum((points - centroids[i]) ** 2, axis=1))
    return centroids


def _nearest(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Exhaustive argmin over centroids, ties to the lowest index. (chunked)"""
    out = np.empty(points.shape[0], dtype=np.int64)
    step = max(1, 2_000_000 // max(centroids.shape[0], 1))
    for s in range(0, points.shape[0], step):
        block = points[s : s + step]
        d2 = (
            np.sum(block**2, axis=1)[:, None]
            - 2.0 * block @ centroids.T
            + np.sum(centroids**2, axis=1)[None, :]
        )
        out[s : s + step] = np.argmin(d2, axis=1)
    return out


def kmeans_inertia(points: np.ndarray, centroids: np.ndarray) -> float:
    assign = _nearest(points, centroids)
    return float(np.sum((points - centroids[assign]) ** 2))


def kmeans_centroids(
    cloud: PointCloud, k: int, config: KMeansConfig | None = None
) -> ClusterTable:
    """Cluster point positions: k-means++ seeding plus mini-batch updates.

    Runs on a uniform working subset capped at `subset_cap` points.  The
    full_batch flag switches to classic Lloyd iterations (monotone inertia).
    Deterministic for a fixed seed.
    """
    config = config or KMeansConfig()
    rng = np.random.default_rng(config.seed)
    pts = cloud.positions
    if pts.shape[0] > config.subset_cap:
        pts = pts[rng.choice(pts.shape[0], size=config.subset_cap, replace=False)]
    n = pts.shape[0]
    if k > n:
        raise ValueError(f"K={k} exceeds working subset size {n}")
    if k > np.unique(pts, axis=0).shape[0]:
        raise ValueError("K exceeds the number of distinct points")

    centroids = _kmeans_pp_seed(pts, k, rng)
    if config.full_batch:
        for _ in range(config.lloyd_iterations):
            assign = _nearest(pts, centroids)
            for j in range(k):
                sel = assign == j
                if sel.any():
                    centroids[j] = pts[sel].mean(axis=0)
    else:
        counts = np.ones(k)
        for _ in range(config.iterations):
            batch = pts[rng.integers(0, n, size=min(config.batch_size, n))]
            assign = _nearest(batch, centroids)
            for j, c in zip(*np.unique(assign, return_counts=True)):
                sel = batch[assign == j]
                counts[j] += c
                eta = c / counts[j]
                centroids[j] = (1.0 - eta) * centroids[j] + eta * sel.mean(axis=0)
    return ClusterTable(centroids)


def assign_clusters(
    positions: np.ndarray, table: ClusterTable, brute_force: bool = False
) -> np.ndarray:
    """Index of the nearest centroid per position, ties to the lowest index.

    The accelerated path uses a KD-tree; exact ties fall back to an
    exhaustive re-check so the result always equals brute-force search.
    """
    if table.k == 0:
        raise ValueError("cluster table is empty")
    positions = np.asarray(positions, dtype=np.float64)
    if brute_force or table.k <= 8:
        return _nearest(positions, table.centroids).astype(np.int32)
    tree = cKDTree(table.centroids)
    dist, idx = tree.query(positions, k=2)
    out = idx[:, 0].astype(np.int32)
    ties = dist[:, 1] <= dist[:, 0] * (1.0 + 1e-12)
    if ties.any():
        out[ties] = _nearest(positions[ties], table.centroids).astype(np.int32)
    return out
