"""Tile-based differentiable rasterizer.

Composites depth-sorted 2D Gaussian footprints front to back.  In weighted
mode each Gaussian's opacity is scaled by its cluster's level weight inside
both the emission and the transmittance terms, and its color carries the
per-cluster correction offset; with all weights forced to 1 and offsets to 0
this reduces exactly to plain compositing.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import _kernels
from .geom import Camera

TILE_SIZE = _kernels.TILE_SIZE


class RenderError(RuntimeError):
    """Raised when a render is requested on an unusable scene (e.g. empty)."""


class WeightingMode(str, Enum):
    """How per-Gaussian compositing weights are chosen."""

    WEIGHTED = "weighted"   # learned per-(cluster, level) softmax weights
    PLAIN = "plain"         # w = 1, no color correction (classic splatting)
    UNIFORM = "uniform"     # w = 1 for every level, correction still applies
    TOP1 = "top1"           # only each cluster's argmax level is rendered
    RANDOM = "random"       # random level weights, redrawn per render


@dataclass
class RenderJob:
    """Prepared per-frame rasterization inputs (already projected)."""

    cam: Camera
    mean2d: np.ndarray        # (N, 2) pixels
    cov2d: np.ndarray         # (N, 3) upper-triangle (a, b, c)
    depth: np.ndarray         # (N,)
    valid: np.ndarray         # (N,) bool
    radius: np.ndarray        # (N,) 3-sigma footprint
    color: np.ndarray         # (N, 3) corrected colors c'
    alpha: np.ndarray         # (N,) opacities in (0, 1)
    weight: np.ndarray        # (N,) per-Gaussian level weights
    level: np.ndarray         # (N,) 1-based level indices
    cluster: np.ndarray       # (N,) cluster indices
    n_levels: int
    weight_table: np.ndarray | None = None  # (K, L), weighted mode only
    mode: WeightingMode = WeightingMode.WEIGHTED
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))


@dataclass
class RenderOutput:
    """Rasterizer outputs plus the state needed for the backward pass."""

    image: np.ndarray         # (H, W, 3) clamped to [0, 1]
    image_raw: np.ndarray     # (H, W, 3) before the final clamp
    opacity: np.ndarray       # (H, W) accumulated opacity = 1 - T_final
    final_t: np.ndarray       # (H, W) remaining transmittance
    level_mass: np.ndarray    # (H, W, L) per-level blended weight mass
    order: np.ndarray         # depth-sorted indices of live Gaussians
    tile_offsets: np.ndarray
    tile_entries: np.ndarray
    stop_entry: np.ndarray    # (H, W) tile-list entry where each pixel stopped

    @property
    def dominant_level(self) -> np.ndarray:
        """(H, W) argmax level (1-based); 0 where nothing was composited."""
        dom = np.argmax(self.level_mass, axis=2).astype(np.int32) + 1
        dom[self.opacity <= 0.0] = 0
        return dom


@dataclass
class RenderGrads:
    """Per-Gaussian gradients from render_backward (zeros for culled rows)."""

    mean2d: np.ndarray
    cov2d: np.ndarray
    alpha: np.ndarray
    weight: np.ndarray
    color: np.ndarray
    weight_table: np.ndarray | None


def sort_gaussians(depth: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Stable ascending depth order over the valid subset."""
    idx = np.flatnonzero(valid)
    return idx[np.argsort(depth[idx], kind="stable")]


def conic_from_cov2d(cov2d: np.ndarray) -> np.ndarray:
    """Invert (N, 3) symmetric 2x2 covariances given as (a, b, c) triples."""
    cov2d = np.asarray(cov2d, dtype=np.float64)
    a, b, c = cov2d[:, 0], cov2d[:, 1], cov2d[:, 2]
    det = a * c - b * b
    return np.stack([c / det, -b / det, a / det], axis=1)


def conic_backward(cov2d: np.ndarray, d_conic: np.ndarray) -> np.ndarray:
    """Chain gradients from conic (a', b', c') back to covariance (a, b, c)."""
    a, b, c = cov2d[:, 0], cov2d[:, 1], cov2d[:, 2]
    det = a * c - b * b
    det2 = det * det
    ga, gb, gc = d_conic[:, 0], d_conic[:, 1], d_conic[:, 2]
    d_a = ga * (-c * c / det2) + gb * (b * c / det2) + gc * (-b * b / det2)
    d_b = (
        ga * (2.0 * b * c / det2)
        + gb * (-(a * c + b * b) / det2)
        + gc * (2.0 * a * b / det2)
    )
    d_c = ga * (-b * b / det2) + gb * (a * b / det2) + gc * (-a * a / det2)
    return np.stack([d_a, d_b, d_c], axis=1)


def tile_bin(job: RenderJob, order: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-tile Gaussian lists (depth order preserved within each tile)."""
    return _kernels.bin_tiles(
        order, job.mean2d, job.radius, job.cam.width, job.cam.height
    )


def _pixel_centers(cam: Camera, dtype) -> tuple[np.ndarray, np.ndarray]:
    x = (np.arange(cam.width, dtype=np.float64) + 0.5).astype(dtype)
    y = (np.arange(cam.height, dtype=np.float64) + 0.5).astype(dtype)
    return x, y


def _wd(job: RenderJob):
    """Working dtype of a job: float32 jobs run the kernels in float32."""
    return job.mean2d.dtype if job.mean2d.dtype == np.float32 else np.float64


def _as(x: np.ndarray, dtype) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=dtype)


def render_forward(job: RenderJob) -> RenderOutput:
    """Rasterize a prepared job; raises RenderError on an empty scene."""
    if job.mean2d.shape[0] == 0:
        raise RenderError("cannot render an empty scene")
    cam = job.cam
    dt = _wd(job)
    order = sort_gaussians(job.depth, job.valid)
    offsets, entries = _kernels.bin_tiles(
        order, _as(job.mean2d, dt), _as(job.radius, dt), cam.width, cam.height
    )
    img = np.zeros((cam.height, cam.width, 3), dtype=dt)
    final_t = np.ones((cam.height, cam.width), dtype=dt)
    mass = np.zeros((cam.height, cam.width, job.n_levels), dtype=dt)
    stop_e = np.zeros((cam.height, cam.width), dtype=np.int64)
    _kernels.composite_forward(
        offsets, entries,
        _as(job.mean2d, dt), _as(conic_from_cov2d(job.cov2d), dt),
        _as(job.radius, dt),
        _as(job.color, dt), _as(job.alpha, dt), _as(job.weight, dt),
        np.ascontiguousarray(job.level - 1, dtype=np.int64),
        job.n_levels, _as(job.background, dt),
        *_pixel_centers(cam, dt),
        img, final_t, mass, stop_e,
    )
    return RenderOutput(
        image=np.clip(img, 0.0, 1.0),
        image_raw=img,
        opacity=1.0 - final_t,
        final_t=final_t,
        level_mass=mass,
        order=order,
        tile_offsets=offsets,
        tile_entries=entries,
        stop_entry=stop_e,
    )


def render_reference(job: RenderJob) -> RenderOutput:
    """Brute-force per-pixel full-list renderer (the tiling oracle)."""
    if job.mean2d.shape[0] == 0:
        raise RenderError("cannot render an empty scene")
    cam = job.cam
    dt = _wd(job)
    order = sort_gaussians(job.depth, job.valid)
    img = np.zeros((cam.height, cam.width, 3), dtype=dt)
    final_t = np.ones((cam.height, cam.width), dtype=dt)
    mass = np.zeros((cam.height, cam.width, job.n_levels), dtype=dt)
    stop_e = np.zeros((cam.height, cam.width), dtype=np.int64)
    _kernels.composite_reference(
        order,
        _as(job.mean2d, dt), _as(conic_from_cov2d(job.cov2d), dt),
        _as(job.radius, dt),
        _as(job.color, dt), _as(job.alpha, dt), _as(job.weight, dt),
        np.ascontiguousarray(job.level - 1, dtype=np.int64),
        job.n_levels, _as(job.background, dt),
        *_pixel_centers(cam, dt),
        img, final_t, mass, stop_e,
    )
    return RenderOutput(
        image=np.clip(img, 0.0, 1.0),
        image_raw=img,
        opacity=1.0 - final_t,
        final_t=final_t,
        level_mass=mass,
        order=order,
        tile_offsets=np.zeros(1, dtype=np.int64),
        tile_entries=np.zeros(0, dtype=np.int64),
        stop_entry=stop_e,
    )


def render_backward(
    job: RenderJob, out: RenderOutput, d_image: np.ndarray
) -> RenderGrads:
    """Exact gradients of a scalar loss through the compositing recurrence.

    Args:
        job: the forward job (unchanged).
        out: the matching forward output.
        d_image: (H, W, 3) loss gradient wrt the clamped output image.

    Returns:
        Per-Gaussian gradients; in weighted mode also the (K, L) table
        gradient accumulated over cluster/level membership.
    """
    n = job.mean2d.shape[0]
    dt = _wd(job)
    # clamp mask: saturated pixels pass no gradient
    raw = out.image_raw
    d_img = np.where((raw > 0.0) & (raw < 1.0), d_image, 0.0)
    d_img = np.ascontiguousarray(d_img, dtype=dt)

    entries = out.tile_entries
    n_ent = entries.shape[0]
    d_mean2d_e = np.zeros((n_ent, 2), dtype=dt)
    d_conic_e = np.zeros((n_ent, 3), dtype=dt)
    d_alpha_e = np.zeros(n_ent, dtype=dt)
    d_weight_e = np.zeros(n_ent, dtype=dt)
    d_color_e = np.zeros((n_ent, 3), dtype=dt)
    conic = _as(conic_from_cov2d(job.cov2d), dt)
    _kernels.composite_backward(
        out.tile_offsets, entries,
        _as(job.mean2d, dt), conic, _as(job.radius, dt),
        _as(job.color, dt), _as(job.alpha, dt), _as(job.weight, dt),
        _as(job.background, dt), *_pixel_centers(job.cam, dt), d_img,
        _as(out.final_t, dt), out.stop_entry,
        d_mean2d_e, d_conic_e, d_alpha_e, d_weight_e, d_color_e,
    )
    d_mean2d = np.zeros((n, 2), dtype=dt)
    d_conic = np.zeros((n, 3), dtype=dt)
    d_alpha = np.zeros(n, dtype=dt)
    d_weight = np.zeros(n, dtype=dt)
    d_color = np.zeros((n, 3), dtype=dt)
    _kernels.reduce_entry_grads(
        entries, d_mean2d_e, d_conic_e, d_alpha_e, d_weight_e, d_color_e,
        d_mean2d, d_conic, d_alpha, d_weight, d_color,
    )
    d_mean2d = d_mean2d.astype(np.float64)
    d_alpha = d_alpha.astype(np.float64)
    d_weight = d_weight.astype(np.float64)
    d_color = d_color.astype(np.float64)
    d_cov2d = conic_backward(
        np.asarray(job.cov2d, dtype=np.float64), d_conic.astype(np.float64)
    )

    d_table = None
    if job.weight_table is not None:
        d_table = np.zeros_like(job.weight_table, dtype=np.float64)
        np.add.at(d_table, (job.cluster, job.level - 1), d_weight)
    return RenderGrads(d_mean2d, d_cov2d, d_alpha, d_weight, d_color, d_table)
