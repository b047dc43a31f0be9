"""Coarse voxel-grid radiance field used to bootstrap the Gaussian pyramid.

A dense density grid plus a small feature grid with a 2-layer appearance
head, trained quickly on the posed images by MSE on random ray batches.
Only approximate geometry is needed downstream (termination depths and
colors for point generation), so the grid stays low-resolution and the
whole thing runs in vectorized numpy with hand-written gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import _kernels, geom
from .errors import NumericalError
from .nets import Mlp

FEATURE_DIM = 8
HEAD_HIDDEN = 32
DIR_PE_FREQS = 2
ESCAPE_OPACITY = 0.5  # rays accumulating less are treated as sky/background


@dataclass
class FieldConfig:
    resolution: int = 128
    steps: int = 5000
    batch_rays: int = 4096
    samples_train: int = 64
    samples_query: int = 128
    lr_grid: float = 1e-2
    lr_head: float = 1e-3
    init_density_raw: float = -2.0
    seed: int = 0


@dataclass
class Ray:
    """A single ray; batched operations take arrays instead."""

    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        if not self.t_near < self.t_far:
            raise ValueError("ray requires t_near < t_far")
        n = np.linalg.norm(self.direction)
        if abs(n - 1.0) > 1e-6:
            raise ValueError("ray direction must be unit length")


class VoxelField:
    """Dense voxel radiance field: softplus density + feature grid + RGB head.

    Grids default to float32; tests that need double-precision gradients can
    pass dtype=np.float64.
    """

    def __init__(self, aabb: np.ndarray, resolution: int = 128,
                 init_density_raw: float = -2.0, seed: int = 0,
                 dtype=np.float32):
        self.aabb = np.asarray(aabb, dtype=np.float64).reshape(2, 3)
        self.resolution = int(resolution)
        self.dtype = np.dtype(dtype)
        r = self.resolution
        rng = np.random.default_rng(seed)
        self.density_raw = np.full((r, r, r), init_density_raw, dtype=self.dtype)
        self.features = rng.normal(
            0.0, 0.01, size=(r, r, r, FEATURE_DIM)
        ).astype(self.dtype)
        self.head = Mlp([FEATURE_DIM + 3 + 6 * DIR_PE_FREQS, HEAD_HIDDEN, 3], rng)
        self.head.weights = [w.astype(self.dtype) for w in self.head.weights]
        self.head.biases = [b.astype(self.dtype) for b in self.head.biases]

    # -- sampling helpers ---------------------------------------------------

    def _grid_coords(self, x: np.ndarray):
        """Corner indices/weights for trilinear interpolation at points x.

        Returns (corner_flat_idx (M, 8), corner_weights (M, 8), inside (M,)).
        """
        lo, hi = self.aabb[0], self.aabb[1]
        r = self.resolution
        m = x.shape[0]
        idx = np.empty((m, 8), dtype=np.int64)
        w = np.empty((m, 8), dtype=self.dtype)
        inside = np.empty(m, dtype=np.bool_)
        inv_cell = (r - 1) / (hi - lo)
        _kernels.grid_coords(
            np.ascontiguousarray(x, dtype=self.dtype),
            lo.astype(self.dtype), inv_cell.astype(self.dtype), r,
            idx, w, inside,
        )
        return idx, w, inside

    def query(self, x: np.ndarray, d: np.ndarray | None = None,
              cache: bool = False, dir_pe: np.ndarray | None = None):
        """Color and density at points x viewed along directions d.

        Args:
            x: (M, 3) positions; points outside the AABB return rgb 0, sigma 0.
            d: (M, 3) unit view directions (unused when dir_pe is given).
            dir_pe: optional precomputed (M, 15) direction encoding; ray-based
                callers compute it once per ray instead of once per sample.

        Returns:
            (rgb (M, 3) in [0, 1], sigma (M,) >= 0) and, when cache is set,
            an opaque tuple for query_backward.
        """
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        idx, w, inside = self._grid_coords(x)
        m = x.shape[0]
        raw = np.empty(m, dtype=self.dtype)
        feat = np.empty((m, FEATURE_DIM), dtype=self.dtype)
        _kernels.grid_gather(
            self.density_raw.reshape(-1), self.features.reshape(-1, FEATURE_DIM),
            idx, w, raw, feat,
        )
        sigma = np.log1p(np.exp(-np.abs(raw))) + np.maximum(raw, 0.0)  # softplus
        if dir_pe is None:
            dir_pe = geom.positional_encoding(
                np.atleast_2d(np.asarray(d, dtype=np.float32)), DIR_PE_FREQS
            )
        head_in = np.concatenate([feat, dir_pe], axis=1)
        y = self.head.forward(head_in, cache=cache)
        rgb = 1.0 / (1.0 + np.exp(-y))
        live = inside.astype(np.float64)
        sigma = sigma * live
        rgb = rgb * live[:, None]
        if not cache:
            return rgb, sigma
        return rgb, sigma, (idx, w, inside, raw, rgb)

    def query_backward(self, cache_tuple, d_rgb: np.ndarray, d_sigma: np.ndarray):
        """Gradients of query wrt both grids and the head parameters.

        Returns (d_density_raw flat, d_features flat (R^3, F), head grads).
        """
        idx, w, inside, raw, rgb = cache_tuple
        live = inside.astype(self.dtype)
        d_y = (d_rgb * rgb * (1.0 - rgb) * live[:, None]).astype(self.dtype)
        d_head_in, head_grads = self.head.backward(d_y)
        d_feat = d_head_in[:, :FEATURE_DIM] * live[:, None]
        d_raw_interp = (d_sigma * live / (1.0 + np.exp(-raw))).astype(self.dtype)

        r3 = self.resolution**3
        d_density = np.zeros(r3, dtype=self.dtype)
        d_features = np.zeros((r3, FEATURE_DIM), dtype=self.dtype)
        _kernels.grid_scatter(
            idx, w, d_raw_interp, d_feat.astype(self.dtype),
            d_density, d_features,
        )
        return d_density, d_features, head_grads

    def parameters(self) -> list[np.ndarray]:
        return [self.density_raw, self.features] + self.head.parameters()


def field_query(f: VoxelField, x: np.ndarray, d: np.ndarray):
    """Single-point query: (rgb, sigma)."""
    rgb, sigma = f.query(np.asarray(x)[None], np.asarray(d)[None])
    return rgb[0], float(sigma[0])


def intersect_aabb(
    origins: np.ndarray, dirs: np.ndarray, aabb: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Slab-test ray/AABB intersection.

    Returns (t_near, t_far, hit); t_near floored at the camera near plane.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
    t0 = (aabb[0] - origins) * inv
    t1 = (aabb[1] - origins) * inv
    t_lo = np.nanmin(np.stack([t0, t1]), axis=0).max(axis=-1)
    t_hi = np.nanmax(np.stack([t0, t1]), axis=0).min(axis=-1)
    t_lo = np.maximum(t_lo, geom.NEAR_PLANE)
    hit = t_hi > t_lo
    return t_lo, t_hi, hit


def _sample_ts(t_near, t_far, n_samples, rng):
    """Stratified sample positions, midpoints when rng is None. (B, S)."""
    b = t_near.shape[0]
    h = ((t_far - t_near) / n_samples)[:, None]
    if rng is None:
        u = np.full((b, n_samples), 0.5)
    else:
        u = rng.random((b, n_samples))
    return t_near[:, None] + (np.arange(n_samples) + u) * h, h


def volume_render_rays(
    f: VoxelField,
    origins: np.ndarray,
    dirs: np.ndarray,
    t_near: np.ndarray,
    t_far: np.ndarray,
    n_samples: int,
    rng: np.random.Generator | None = None,
    cache: bool = False,
):
    """Composite stratified samples along a batch of rays.

    Returns:
        dict with color (B, 3), depth (B,), opacity (B,); plus a backward
        cache when requested.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    b = origins.shape[0]
    ts, h = _sample_ts(t_near, t_far, n_samples, rng)
    pos = origins[:, None, :] + ts[..., None] * dirs[:, None, :]
    ray_pe = geom.positional_encoding(dirs.astype(f.dtype), DIR_PE_FREQS)
    q = f.query(
        pos.reshape(-1, 3), cache=cache,
        dir_pe=np.repeat(ray_pe, n_samples, axis=0),
    )
    rgb, sigma = q[0].reshape(b, n_samples, 3), q[1].reshape(b, n_samples)
    alpha = 1.0 - np.exp(-sigma * h)
    trans = np.cumprod(1.0 - alpha, axis=1)
    trans = np.concatenate([np.ones((b, 1)), trans[:, :-1]], axis=1)
    weights = trans * alpha
    color = np.einsum("bs,bsc->bc", weights, rgb)
    opacity = weights.sum(axis=1)
    depth = (weights * ts).sum(axis=1) / np.maximum(opacity, 1e-8)
    result = {"color": color, "depth": depth, "opacity": opacity, "weights": weights}
    if cache:
        result["cache"] = (q[2], rgb, sigma, alpha, trans, ts, h)
    return result


def volume_render_backward(f: VoxelField, result: dict, d_color: np.ndarray):
    """Backward of volume_render_rays through the color output only."""
    qcache, rgb, sigma, alpha, trans, ts, h = result["cache"]
    weights = result["weights"]
    d_rgb = weights[..., None] * d_color[:, None, :]
    d_w = np.einsum("bc,bsc->bs", d_color, rgb)
    q = d_w * weights  # dL/dT_j * contribution terms
    suffix = np.cumsum(q[:, ::-1], axis=1)[:, ::-1] - q
    d_alpha = d_w * trans - suffix / np.maximum(1.0 - alpha, 1e-12)
    d_sigma = d_alpha * (1.0 - alpha) * h
    return f.query_backward(
        qcache, d_rgb.reshape(-1, 3), d_sigma.reshape(-1)
    )


def volume_render_ray(f: VoxelField, ray: Ray, n_samples: int,
                      rng: np.random.Generator | None = None):
    """Single-ray wrapper: (color, expected_depth, opacity)."""
    out = volume_render_rays(
        f,
        ray.origin[None],
        ray.direction[None],
        np.array([ray.t_near]),
        np.array([ray.t_far]),
        n_samples,
        rng=rng,
    )
    return out["color"][0], float(out["depth"][0]), float(out["opacity"][0])


def estimate_terminations(
    f: VoxelField,
    origins: np.ndarray,
    dirs: np.ndarray,
    t_near: np.ndarray,
    t_far: np.ndarray,
    n_samples: int = 128,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Expected termination depth per ray and a mask of rays that terminate.

    Rays whose accumulated opacity stays below the escape threshold (sky,
    background) are masked out.
    """
    out = volume_render_rays(f, origins, dirs, t_near, t_far, n_samples, rng=rng)
    return out["depth"], out["opacity"] >= ESCAPE_OPACITY


def estimate_termination(f: VoxelField, ray: Ray,
                         n_samples: int = 128) -> float | None:
    """Single-ray termination depth, or None when the ray escapes."""
    z, ok = estimate_terminations(
        f,
        ray.origin[None],
        ray.direction[None],
        np.array([ray.t_near]),
        np.array([ray.t_far]),
        n_samples,
    )
    return float(z[0]) if ok[0] else None


def aabb_from_cameras(cameras, pad: float = 2.0) -> np.ndarray:
    """Axis-aligned box around the camera hull, half-extents scaled by pad."""
    centers = np.stack([c.center for c in cameras])
    lo, hi = centers.min(axis=0), centers.max(axis=0)
    mid = 0.5 * (lo + hi)
    half = np.maximum(0.5 * (hi - lo), 1e-3)
    half = np.maximum(half, 0.25 * half.max())
    return np.stack([mid - pad * half, mid + pad * half])


def train_field(dataset, config: FieldConfig | None = None,
                log=None) -> VoxelField:
    """Fit the coarse field to the dataset by MSE on random ray batches.

    Deterministic for a fixed seed.  Raises NumericalError if the loss
    becomes non-finite.
    """
    config = config or FieldConfig()
    if len(dataset.images) == 0:
        raise ValueError("cannot train a field on an empty dataset")
    f = VoxelField(
        aabb_from_cameras(dataset.cameras),
        resolution=config.resolution,
        init_density_raw=config.init_density_raw,
        seed=config.seed,
    )
    rng = np.random.default_rng(config.seed)
    params = f.parameters()
    moments = [(np.zeros_like(p), np.zeros_like(p)) for p in params]
    lrs = [config.lr_grid, config.lr_grid] + [config.lr_head] * (len(params) - 2)
    dir_cache: dict[int, np.ndarray] = {}

    n_imgs = len(dataset.images)
    for step in range(config.steps):
        img_idx = rng.integers(0, n_imgs, size=config.batch_rays)
        origins = np.empty((config.batch_rays, 3))
        dirs = np.empty((config.batch_rays, 3))
        targets = np.empty((config.batch_rays, 3))
        for i in np.unique(img_idx):
            sel = img_idx == i
            cam = dataset.cameras[i]
            img = dataset.images[i]
            if i not in dir_cache:
                dir_cache[i] = cam.pixel_directions()
            k = int(sel.sum())
            py = rng.integers(0, cam.height, size=k)
            px = rng.integers(0, cam.width, size=k)
            origins[sel] = cam.center
            dirs[sel] = dir_cache[i][py, px]
            targets[sel] = img[py, px]
        t_lo, t_hi, hit = intersect_aabb(origins, dirs, f.aabb)
        t_hi = np.where(hit, t_hi, t_lo + 1e-3)

        out = volume_render_rays(
            f, origins, dirs, t_lo, t_hi, config.samples_train,
            rng=rng, cache=True,
        )
        diff = out["color"] - targets
        loss = float(np.mean(diff**2))
        if not np.isfinite(loss):
            raise NumericalError(f"field training diverged at step {step}")
        d_color = 2.0 * diff / diff.size
        d_density, d_features, head_grads = volume_render_backward(f, out, d_color)
        grads = [
            d_density.reshape(f.density_raw.shape),
            d_features.reshape(f.features.shape),
            *head_grads,
        ]
        t = step + 1
        for p, g, (m1, m2), lr in zip(params, grads, moments, lrs):
            m1 *= 0.9
            m1 += 0.1 * g
            m2 *= 0.999
            m2 += 0.001 * g * g
            mhat = m1 / (1.0 - 0.9**t)
            vhat = m2 / (1.0 - 0.999**t)
            p -= lr * mhat / (np.sqrt(vhat) + 1e-8)
        if log is not None and (step % 250 == 0 or step == config.steps - 1):
            log(f"field step {step}\tloss {loss:.6f}")
    return f
