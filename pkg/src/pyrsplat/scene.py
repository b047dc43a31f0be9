"""Scene containers: the multi-level Gaussian set, the cluster table, the
learnable networks/embeddings, and the full forward render pipeline that
cli/serve/train all share.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geom, nets, splat
from .geom import Camera
from .nets import Embeddings, Mlp
from .splat import RenderJob, RenderOutput, WeightingMode

SH_DEGREE = 3
N_SH_COEFFS = 16


@dataclass
class GaussianPyramid:
    """Struct-of-arrays storage for all Gaussians across pyramid levels."""

    positions: np.ndarray       # (N, 3)
    quaternions: np.ndarray     # (N, 4), renormalized after optimizer steps
    log_scales: np.ndarray      # (N, 3)
    opacity_logits: np.ndarray  # (N,)
    sh: np.ndarray              # (N, 16, 3)
    levels: np.ndarray          # (N,) uint8, 1-based
    clusters: np.ndarray        # (N,) int32

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def dtype(self):
        return self.positions.dtype

    def opacities(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.opacity_logits.astype(np.float64)))

    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales.astype(np.float64))

    def level_counts(self, n_levels: int) -> np.ndarray:
        return np.bincount(self.levels.astype(int), minlength=n_levels + 1)[1:]

    def select(self, mask_or_idx) -> "GaussianPyramid":
        return GaussianPyramid(
            positions=self.positions[mask_or_idx],
            quaternions=self.quaternions[mask_or_idx],
            log_scales=self.log_scales[mask_or_idx],
            opacity_logits=self.opacity_logits[mask_or_idx],
            sh=self.sh[mask_or_idx],
            levels=self.levels[mask_or_idx],
            clusters=self.clusters[mask_or_idx],
        )

    @staticmethod
    def concatenate(parts: list["GaussianPyramid"]) -> "GaussianPyramid":
        return GaussianPyramid(
            positions=np.concatenate([p.positions for p in parts]),
            quaternions=np.concatenate([p.quaternions for p in parts]),
            log_scales=np.concatenate([p.log_scales for p in parts]),
            opacity_logits=np.concatenate([p.opacity_logits for p in parts]),
            sh=np.concatenate([p.sh for p in parts]),
            levels=np.concatenate([p.levels for p in parts]),
            clusters=np.concatenate([p.clusters for p in parts]),
        )

    def copy(self) -> "GaussianPyramid":
        return GaussianPyramid(
            self.positions.copy(), self.quaternions.copy(),
            self.log_scales.copy(), self.opacity_logits.copy(),
            self.sh.copy(), self.levels.copy(), self.clusters.copy(),
        )


@dataclass
class SceneModel:
    """Everything needed to render: geometry, clusters, networks, metadata."""

    gaussians: GaussianPyramid
    centroids: np.ndarray            # (K, 3)
    embeddings: Embeddings
    weight_net: Mlp
    correction_net: Mlp
    n_levels: int
    aabb: np.ndarray                 # (2, 3) scene bounding box
    scene_extent: float
    active_sh_degree: int = SH_DEGREE
    weighting_mode: WeightingMode = WeightingMode.WEIGHTED
    color_correction: bool = True
    iteration: int = 0
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @property
    def n_clusters(self) -> int:
        return self.centroids.shape[0]

    def normalized_cam_center(self, cam: Camera) -> np.ndarray:
        """Map the camera center into [-1, 1]^3 via the scene AABB."""
        lo, hi = self.aabb[0], self.aabb[1]
        half = np.maximum((hi - lo) * 0.5, 1e-9)
        return (cam.center - (lo + hi) * 0.5) / half

    def appearance_row(self, index: int | None) -> np.ndarray:
        """Training row for a known camera, mean row otherwise."""
        app = self.embeddings.appearance
        if index is not None and 0 <= index < app.shape[0]:
            return app[index].astype(np.float64)
        return self.embeddings.mean_appearance().astype(np.float64)

    def snapshot(self) -> "SceneModel":
        """Deep, immutable-by-convention copy for concurrent rendering."""
        import copy as _copy

        return _copy.deepcopy(self)


@dataclass
class ForwardCaches:
    """Intermediate state kept alive for the training backward pass."""

    proj: geom.Projection
    dirs_raw: np.ndarray
    dirs: np.ndarray
    sh_colors: np.ndarray
    clamp_mask: np.ndarray
    weight_cache: nets.WeightingCache | None
    corr_cache: nets.CorrectionCache | None
    weight_table: np.ndarray
    appearance_index: int | None
    job: RenderJob


def compute_weight_table(
    model: SceneModel,
    cam: Camera,
    mode: WeightingMode,
    rng: np.random.Generator | None = None,
    cache: bool = False,
) -> tuple[np.ndarray, nets.WeightingCache | None]:
    """(K, L) per-cluster level weights under the requested weighting mode."""
    K, L = model.n_clusters, model.n_levels
    if mode in (WeightingMode.PLAIN, WeightingMode.UNIFORM):
        return np.ones((K, L)), None
    if mode == WeightingMode.RANDOM:
        rng = rng or np.random.default_rng(0)
        table = rng.uniform(0.05, 1.0, size=(K, L))
        return table / table.sum(axis=1, keepdims=True), None
    table, wcache = nets.weighting_forward(
        model.weight_net,
        model.embeddings.cluster.astype(np.float64),
        model.normalized_cam_center(cam),
        cache=cache,
    )
    if mode == WeightingMode.TOP1:
        hard = np.zeros_like(table)
        hard[np.arange(K), np.argmax(table, axis=1)] = 1.0
        return hard, wcache
    return table, wcache


def render_view(
    model: SceneModel,
    cam: Camera,
    mode: WeightingMode | None = None,
    appearance_index: int | None = None,
    enabled_levels: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
    want_cache: bool = False,
    correction: bool | None = None,
) -> tuple[RenderOutput, ForwardCaches | None]:
    """Full forward pipeline: project, shade, weight, composite.

    Args:
        mode: weighting mode override (defaults to the model's mode).
        appearance_index: camera id into the appearance table; None uses the
            mean embedding.
        enabled_levels: optional (L,) bool mask; disabled levels get weight 0.
        rng: RNG for the random-weights mode.
        want_cache: keep intermediates for a backward pass.
    """
    if model.gaussians.n == 0:
        raise splat.RenderError("cannot render an empty scene")
    mode = mode or model.weighting_mode
    g = model.gaussians
    positions = g.positions.astype(np.float64)
    quats = g.quaternions.astype(np.float64)
    log_scales = g.log_scales.astype(np.float64)

    proj = geom.project_gaussians(positions, quats, log_scales, cam)

    dirs_raw = positions - cam.center
    dirs = geom.normalize_dirs(dirs_raw)
    sh_colors = geom.eval_sh(g.sh.astype(np.float64), dirs, model.active_sh_degree)
    clamp_mask = sh_colors > 0.0
    colors = np.where(clamp_mask, sh_colors, 0.0)

    corr_cache = None
    use_corr = model.color_correction if correction is None else correction
    use_corr = use_corr and mode != WeightingMode.PLAIN
    if use_corr:
        offsets, corr_cache = nets.color_correction(
            model.correction_net,
            model.embeddings.cluster.astype(np.float64),
            model.appearance_row(appearance_index),
            cache=want_cache,
        )
        colors = colors + offsets[g.clusters]

    table, wcache = compute_weight_table(
        model, cam, mode, rng=rng,
        cache=want_cache and mode in (WeightingMode.WEIGHTED, WeightingMode.TOP1),
    )
    if enabled_levels is not None:
        table = table * np.asarray(enabled_levels, dtype=np.float64)[None, :]
    weights = table[g.clusters, g.levels.astype(int) - 1]

    # float32 scenes run the pixel kernels in float32
    dt = np.float32 if g.dtype == np.float32 else np.float64
    job = RenderJob(
        cam=cam,
        mean2d=proj.mean2d.astype(dt),
        cov2d=proj.cov2d,
        depth=proj.depth,
        valid=proj.valid,
        radius=proj.radius,
        color=colors,
        alpha=g.opacities(),
        weight=weights,
        level=g.levels.astype(np.int64),
        cluster=g.clusters.astype(np.int64),
        n_levels=model.n_levels,
        weight_table=table if mode in (WeightingMode.WEIGHTED, WeightingMode.TOP1) else None,
        mode=mode,
        background=model.background.astype(np.float64),
    )
    out = splat.render_forward(job)
    if not want_cache:
        return out, None
    caches = ForwardCaches(
        proj=proj, dirs_raw=dirs_raw, dirs=dirs, sh_colors=sh_colors,
        clamp_mask=clamp_mask, weight_cache=wcache, corr_cache=corr_cache,
        weight_table=table, appearance_index=appearance_index, job=job,
    )
    return out, caches
