"""Core geometry for anisotropic 3D Gaussians.

Covariance construction from (quaternion, log-scale), perspective projection
of Gaussians to screen space with the first-order (EWA) linearization,
real spherical-harmonics color evaluation up to degree 3, and NeRF-style
positional encoding.  Every differentiable operation here has an explicit
`*_backward` companion returning exact reverse-mode gradients; there is no
autodiff anywhere in this package.

Conventions:
    * Camera space is right-handed, x right, y up, camera looking down -z
      (OpenGL style).  View-space depth is ``-z`` and is positive in front
      of the camera.
    * Pixel coordinates: u grows right, v grows down, pixel (row, col)
      center at (col + 0.5, row + 0.5).
    * Quaternions are (w, x, y, z) and normalized internally.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

NEAR_PLANE = 0.01
COV2D_FLOOR = 0.3
CULL_SIGMA = 3.0

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

# coefficients per degree: 1, 4, 9, 16
SH_COEFFS_PER_DEGREE = (1, 4, 9, 16)


class GeometryError(ValueError):
    """Raised when a geometric contract (orthonormality, norms) is violated."""


@dataclass
class Camera:
    """Pinhole camera with a rigid world-to-camera transform.

    Attributes:
        w2c: 4x4 world-to-camera transform, rotation block orthonormal,
            camera looks down -z in camera space.
        fx, fy: focal lengths in pixels.
        cx, cy: principal point in pixels.
        width, height: image size in pixels.
        index: id into the per-camera appearance table (-1 if unknown).
    """

    w2c: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    index: int = -1
    center: np.ndarray = field(init=False)

    def __post_init__(self):
        self.w2c = np.asarray(self.w2c, dtype=np.float64)
        if self.w2c.shape != (4, 4):
            raise GeometryError(f"w2c must be 4x4, got {self.w2c.shape}")
        R = self.w2c[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6):
            raise GeometryError("w2c rotation block is not orthonormal")
        if np.linalg.det(R) < 0:
            raise GeometryError("w2c rotation block has negative determinant")
        # camera center: solve w2c @ [c, 1] = [0, 0, 0, 1]
        self.center = -R.T @ self.w2c[:3, 3]

    @property
    def rotation(self) -> np.ndarray:
        return self.w2c[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.w2c[:3, 3]

    def c2w(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.rotation.T
        out[:3, 3] = self.center
        return out

    def pixel_directions(self) -> np.ndarray:
        """World-space unit ray directions through every pixel center, (H, W, 3)."""
        u = (np.arange(self.width) + 0.5 - self.cx) / self.fx
        v = (np.arange(self.height) + 0.5 - self.cy) / self.fy
        uu, vv = np.meshgrid(u, v)
        # camera looks down -z; v grows downward while camera-space y is up
        dirs_cam = np.stack([uu, -vv, -np.ones_like(uu)], axis=-1)
        dirs = dirs_cam @ self.rotation  # == (R^T @ d) per pixel
        return dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)


@dataclass
class Gaussian:
    """A single anisotropic Gaussian primitive (scalar record form).

    The batch pipeline works on struct-of-arrays (see scene.GaussianPyramid);
    this record exists for the single-primitive operations and tests.
    """

    position: np.ndarray
    rotation: np.ndarray  # quaternion (w, x, y, z)
    log_scale: np.ndarray
    opacity_logit: float
    sh: np.ndarray  # (16, 3)
    level: int = 1
    cluster: int = 0

    @property
    def opacity(self) -> float:
        return float(1.0 / (1.0 + np.exp(-self.opacity_logit)))


def normalize_quaternion(quat: np.ndarray) -> np.ndarray:
    """Normalize (..., 4) quaternions to unit length."""
    quat = np.asarray(quat, dtype=np.float64)
    norm = np.linalg.norm(quat, axis=-1, keepdims=True)
    return quat / norm


def quat_to_rotmat(quat: np.ndarray) -> np.ndarray:
    """Unit-normalize (..., 4) quaternions and convert to (..., 3, 3) rotations."""
    q = normalize_quaternion(quat)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def _rotmat_backward(quat_raw: np.ndarray, d_R: np.ndarray) -> np.ndarray:
    """Gradient of quat_to_rotmat wrt the raw (unnormalized) quaternion.

    Args:
        quat_raw: (..., 4) raw quaternions as passed to quat_to_rotmat.
        d_R: (..., 3, 3) upstream gradient wrt each rotation-matrix entry.

    Returns:
        (..., 4) gradient wrt quat_raw.
    """
    quat_raw = np.asarray(quat_raw, dtype=np.float64)
    q = normalize_quaternion(quat_raw)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    g = d_R
    dw = 2 * (
        -z * g[..., 0, 1] + y * g[..., 0, 2]
        + z * g[..., 1, 0] - x * g[..., 1, 2]
        - y * g[..., 2, 0] + x * g[..., 2, 1]
    )
    dx = 2 * (
        y * g[..., 0, 1] + z * g[..., 0, 2]
        + y * g[..., 1, 0] - 2 * x * g[..., 1, 1] - w * g[..., 1, 2]
        + z * g[..., 2, 0] + w * g[..., 2, 1] - 2 * x * g[..., 2, 2]
    )
    dy = 2 * (
        -2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2]
        + x * g[..., 1, 0] + z * g[..., 1, 2]
        - w * g[..., 2, 0] + z * g[..., 2, 1] - 2 * y * g[..., 2, 2]
    )
    dz = 2 * (
        -2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2]
        + w * g[..., 1, 0] - 2 * z * g[..., 1, 1] + y * g[..., 1, 2]
        + x * g[..., 2, 0] + y * g[..., 2, 1]
    )
    d_unit = np.stack([dw, dx, dy, dz], axis=-1)
    # through the normalization q = q_raw / |q_raw|
    norm = np.linalg.norm(quat_raw, axis=-1, keepdims=True)
    dot = np.sum(d_unit * q, axis=-1, keepdims=True)
    return (d_unit - q * dot) / norm


def build_covariance(rotation: np.ndarray, log_scale: np.ndarray) -> np.ndarray:
    """3D covariance Sigma = R * diag(exp(2 s)) * R^T from quaternion + log-scale.

    Works on single vectors or batches with a leading axis.  The quaternion is
    normalized internally; a zero quaternion is a contract violation.
    """
    R = quat_to_rotmat(rotation)
    s2 = np.exp(2.0 * np.asarray(log_scale, dtype=np.float64))
    return np.einsum("...ik,...k,...jk->...ij", R, s2, R)


def build_covariance_backward(
    rotation: np.ndarray, log_scale: np.ndarray, d_sigma: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Backward of build_covariance.

    Args:
        rotation: raw quaternions as passed forward, (..., 4).
        log_scale: (..., 3).
        d_sigma: upstream gradient wrt each covariance entry, (..., 3, 3);
            must already account for symmetric double-counting.

    Returns:
        (d_rotation, d_log_scale).
    """
    R = quat_to_rotmat(rotation)
    s2 = np.exp(2.0 * np.asarray(log_scale, dtype=np.float64))
    d_sym = d_sigma + np.swapaxes(d_sigma, -1, -2)
    # dR = (dS + dS^T) R D
    d_R = np.einsum("...ij,...jk,...k->...ik", d_sym, R, s2)
    # ds_a = 2 e^{2s_a} (R^T dS R)_aa
    rtr = np.einsum("...ia,...ij,...jb->...ab", R, d_sigma, R)
    d_log_scale = 2.0 * s2 * np.einsum("...aa->...a", rtr)
    d_rotation = _rotmat_backward(rotation, d_R)
    return d_rotation, d_log_scale


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------

@dataclass
class Projection:
    """Screen-space footprints of a batch of Gaussians plus backward cache.

    Attributes:
        mean2d: (N, 2) pixel coordinates of the projected centers.
        cov2d: (N, 3) upper-triangle (a, b, c) of the 2x2 screen covariance,
            low-pass floor already added to a and c.
        depth: (N,) positive view-space depth.
        valid: (N,) bool; False for culled Gaussians.
        radius: (N,) 3-sigma footprint radius in pixels (0 where invalid).
    """

    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: np.ndarray
    valid: np.ndarray
    radius: np.ndarray
    # caches for the backward pass
    t_cam: np.ndarray
    J: np.ndarray
    V: np.ndarray
    cam: Camera


def project_gaussians(
    positions: np.ndarray,
    quaternions: np.ndarray,
    log_scales: np.ndarray,
    cam: Camera,
) -> Projection:
    """Project a batch of Gaussians into screen space (EWA linearization).

    The 2x2 screen covariance is J W Sigma W^T J^T with J the Jacobian of the
    pinhole map at the mean, plus a fixed low-pass floor on the diagonal.
    Gaussians behind the near plane or with a 3-sigma footprint disk fully
    outside the image are flagged invalid.
    """
    positions = np.asarray(positions, dtype=np.float64)
    n = positions.shape[0]
    W = cam.rotation
    t = positions @ W.T + cam.translation  # camera-space means
    depth = -t[:, 2]
    safe = depth > NEAR_PLANE
    zeta = np.where(safe, depth, 1.0)

    mean2d = np.empty((n, 2))
    mean2d[:, 0] = cam.cx + cam.fx * t[:, 0] / zeta
    mean2d[:, 1] = cam.cy - cam.fy * t[:, 1] / zeta

    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = cam.fx / zeta
    J[:, 0, 2] = cam.fx * t[:, 0] / zeta**2
    J[:, 1, 1] = -cam.fy / zeta
    J[:, 1, 2] = -cam.fy * t[:, 1] / zeta**2

    sigma = build_covariance(quaternions, log_scales)
    V = W @ sigma @ W.T  # camera-space covariance, (N, 3, 3)
    C = np.einsum("nij,njk,nlk->nil", J, V, J)
    a = C[:, 0, 0] + COV2D_FLOOR
    b = C[:, 0, 1]
    c = C[:, 1, 1] + COV2D_FLOOR
    cov2d = np.stack([a, b, c], axis=1)

    # 3-sigma radius from the larger eigenvalue of the 2x2 covariance
    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid**2 - (a * c - b * b), 0.0))
    radius = CULL_SIGMA * np.sqrt(np.maximum(lam_max, 0.0))

    inside = (
        (mean2d[:, 0] + radius > 0.0)
        & (mean2d[:, 0] - radius < cam.width)
        & (mean2d[:, 1] + radius > 0.0)
        & (mean2d[:, 1] - radius < cam.height)
    )
    valid = safe & inside
    radius = np.where(valid, radius, 0.0)
    return Projection(mean2d, cov2d, depth, valid, radius, t, J, V, cam)


def project_backward(
    proj: Projection,
    quaternions: np.ndarray,
    log_scales: np.ndarray,
    d_mean2d: np.ndarray,
    d_cov2d: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Backward of project_gaussians.

    Args:
        proj: the forward result (carries the caches).
        quaternions, log_scales: the forward inputs.
        d_mean2d: (N, 2) gradient wrt projected centers.
        d_cov2d: (N, 3) gradient wrt the (a, b, c) covariance triple.

    Returns:
        (d_position, d_quaternion, d_log_scale); rows for invalid Gaussians
        are zero.
    """
    cam, t, J, V = proj.cam, proj.t_cam, proj.J, proj.V
    n = t.shape[0]
    live = proj.valid.astype(np.float64)
    d_mean2d = d_mean2d * live[:, None]
    d_cov2d = d_cov2d * live[:, None]

    # symmetric matrix form of the (a, b, c) gradient
    dC = np.empty((n, 2, 2))
    dC[:, 0, 0] = d_cov2d[:, 0]
    dC[:, 0, 1] = 0.5 * d_cov2d[:, 1]
    dC[:, 1, 0] = 0.5 * d_cov2d[:, 1]
    dC[:, 1, 1] = d_cov2d[:, 2]

    dV = np.einsum("nji,njk,nkl->nil", J, dC, J)
    dJ = 2.0 * np.einsum("nij,njk,nkl->nil", dC, J, V)

    zeta = proj.depth.copy()
    zeta[~proj.valid] = 1.0
    fx, fy = cam.fx, cam.fy
    tx, ty = t[:, 0], t[:, 1]
    dt = np.einsum("nji,nj->ni", J, d_mean2d)  # mean2d path: J^T d_mean2d
    dt[:, 0] += dJ[:, 0, 2] * fx / zeta**2
    dt[:, 1] += dJ[:, 1, 2] * (-fy / zeta**2)
    dt[:, 2] += (
        dJ[:, 0, 0] * fx / zeta**2
        + dJ[:, 1, 1] * (-fy / zeta**2)
        + dJ[:, 0, 2] * 2.0 * fx * tx / zeta**3
        + dJ[:, 1, 2] * (-2.0 * fy * ty / zeta**3)
    )

    W = cam.rotation
    d_position = dt @ W
    d_sigma = np.einsum("ji,njk,kl->nil", W, dV, W)
    d_quat, d_log_scale = build_covariance_backward(quaternions, log_scales, d_sigma)
    d_quat *= live[:, None]
    d_log_scale *= live[:, None]
    return d_position, d_quat, d_log_scale


def project_gaussian(g: Gaussian, cam: Camera) -> dict:
    """Single-Gaussian projection; see project_gaussians for the contract."""
    proj = project_gaussians(
        g.position[None], g.rotation[None], g.log_scale[None], cam
    )
    a, b, c = proj.cov2d[0]
    return {
        "mean2d": proj.mean2d[0],
        "cov2d": np.array([[a, b], [b, c]]),
        "depth": float(proj.depth[0]),
        "valid": bool(proj.valid[0]),
        "radius": float(proj.radius[0]),
    }


# ---------------------------------------------------------------------------
# spherical harmonics
# ---------------------------------------------------------------------------

def _sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Real SH basis values for (N, 3) unit directions, (N, n_coeffs)."""
    n = dirs.shape[0]
    n_coeffs = SH_COEFFS_PER_DEGREE[degree]
    basis = np.empty((n, n_coeffs))
    basis[:, 0] = SH_C0
    if degree < 1:
        return basis
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    basis[:, 1] = -SH_C1 * y
    basis[:, 2] = SH_C1 * z
    basis[:, 3] = -SH_C1 * x
    if degree < 2:
        return basis
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    basis[:, 4] = SH_C2[0] * xy
    basis[:, 5] = SH_C2[1] * yz
    basis[:, 6] = SH_C2[2] * (2.0 * zz - xx - yy)
    basis[:, 7] = SH_C2[3] * xz
    basis[:, 8] = SH_C2[4] * (xx - yy)
    if degree < 3:
        return basis
    basis[:, 9] = SH_C3[0] * y * (3.0 * xx - yy)
    basis[:, 10] = SH_C3[1] * xy * z
    basis[:, 11] = SH_C3[2] * y * (4.0 * zz - xx - yy)
    basis[:, 12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
    basis[:, 13] = SH_C3[4] * x * (4.0 * zz - xx - yy)
    basis[:, 14] = SH_C3[5] * z * (xx - yy)
    basis[:, 15] = SH_C3[6] * x * (xx - yy)
    return basis


def _sh_basis_dir_grad(dirs: np.ndarray, degree: int) -> np.ndarray:
    """d(basis)/d(dir) for (N, 3) directions, (N, n_coeffs, 3)."""
    n = dirs.shape[0]
    n_coeffs = SH_COEFFS_PER_DEGREE[degree]
    g = np.zeros((n, n_coeffs, 3))
    if degree < 1:
        return g
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    g[:, 1, 1] = -SH_C1
    g[:, 2, 2] = SH_C1
    g[:, 3, 0] = -SH_C1
    if degree < 2:
        return g
    g[:, 4, 0] = SH_C2[0] * y
    g[:, 4, 1] = SH_C2[0] * x
    g[:, 5, 1] = SH_C2[1] * z
    g[:, 5, 2] = SH_C2[1] * y
    g[:, 6, 0] = -2.0 * SH_C2[2] * x
    g[:, 6, 1] = -2.0 * SH_C2[2] * y
    g[:, 6, 2] = 4.0 * SH_C2[2] * z
    g[:, 7, 0] = SH_C2[3] * z
    g[:, 7, 2] = SH_C2[3] * x
    g[:, 8, 0] = 2.0 * SH_C2[4] * x
    g[:, 8, 1] = -2.0 * SH_C2[4] * y
    if degree < 3:
        return g
    xx, yy, zz = x * x, y * y, z * z
    g[:, 9, 0] = SH_C3[0] * 6.0 * x * y
    g[:, 9, 1] = SH_C3[0] * (3.0 * xx - 3.0 * yy)
    g[:, 10, 0] = SH_C3[1] * y * z
    g[:, 10, 1] = SH_C3[1] * x * z
    g[:, 10, 2] = SH_C3[1] * x * y
    g[:, 11, 0] = SH_C3[2] * (-2.0 * x * y)
    g[:, 11, 1] = SH_C3[2] * (4.0 * zz - xx - 3.0 * yy)
    g[:, 11, 2] = SH_C3[2] * 8.0 * y * z
    g[:, 12, 0] = SH_C3[3] * (-6.0 * x * z)
    g[:, 12, 1] = SH_C3[3] * (-6.0 * y * z)
    g[:, 12, 2] = SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)
    g[:, 13, 0] = SH_C3[4] * (4.0 * zz - 3.0 * xx - yy)
    g[:, 13, 1] = SH_C3[4] * (-2.0 * x * y)
    g[:, 13, 2] = SH_C3[4] * 8.0 * x * z
    g[:, 14, 0] = SH_C3[5] * 2.0 * x * z
    g[:, 14, 1] = SH_C3[5] * (-2.0 * y * z)
    g[:, 14, 2] = SH_C3[5] * (xx - yy)
    g[:, 15, 0] = SH_C3[6] * (3.0 * xx - yy)
    g[:, 15, 1] = SH_C3[6] * (-2.0 * x * y)
    return g


def eval_sh(coeffs: np.ndarray, dirs: np.ndarray, degree: int = 3) -> np.ndarray:
    """Evaluate SH color: sum_k coeffs_k * Y_k(dir) + 0.5, unclamped.

    Args:
        coeffs: (..., n_coeffs, 3) with n_coeffs >= the active degree's count.
        dirs: (..., 3) unit directions.
        degree: active degree in {0, 1, 2, 3}; higher-order coeffs ignored.
    """
    coeffs = np.asarray(coeffs, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    single = dirs.ndim == 1
    if single:
        coeffs, dirs = coeffs[None], dirs[None]
    k = SH_COEFFS_PER_DEGREE[degree]
    basis = _sh_basis(dirs, degree)
    rgb = np.einsum("nk,nkc->nc", basis, coeffs[:, :k, :]) + 0.5
    return rgb[0] if single else rgb


def eval_sh_backward(
    coeffs: np.ndarray, dirs: np.ndarray, d_rgb: np.ndarray, degree: int = 3
) -> tuple[np.ndarray, np.ndarray]:
    """Backward of eval_sh: returns (d_coeffs, d_dirs).

    d_coeffs covers the full (N, n_total, 3) coefficient array with zeros in
    the inactive bands; d_dirs is wrt the (unit) direction input.
    """
    coeffs = np.asarray(coeffs, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    k = SH_COEFFS_PER_DEGREE[degree]
    basis = _sh_basis(dirs, degree)
    d_coeffs = np.zeros_like(coeffs)
    d_coeffs[:, :k, :] = basis[:, :, None] * d_rgb[:, None, :]
    dgrad = _sh_basis_dir_grad(dirs, degree)
    d_dirs = np.einsum("nkc,nc,nkd->nd", coeffs[:, :k, :], d_rgb, dgrad)
    return d_coeffs, d_dirs


def normalize_dirs(vecs: np.ndarray) -> np.ndarray:
    """Normalize (N, 3) vectors to unit length."""
    return vecs / np.linalg.norm(vecs, axis=-1, keepdims=True)


def normalize_dirs_backward(vecs: np.ndarray, d_unit: np.ndarray) -> np.ndarray:
    """Backward of normalize_dirs wrt the raw vectors."""
    norm = np.linalg.norm(vecs, axis=-1, keepdims=True)
    unit = vecs / norm
    dot = np.sum(d_unit * unit, axis=-1, keepdims=True)
    return (d_unit - unit * dot) / norm


def positional_encoding(x: np.ndarray, n_freqs: int) -> np.ndarray:
    """NeRF positional encoding [x, sin(2^0 pi x), cos(2^0 pi x), ...].

    Componentwise over the last axis; output length 3 + 6 * n_freqs for
    3-vectors.  The caller is responsible for normalizing x into [-1, 1].
    """
    x = np.asarray(x)
    if x.dtype not in (np.float32, np.float64):
        x = x.astype(np.float64)
    parts = [x]
    for f in range(n_freqs):
        arg = (2.0**f) * np.pi * x
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    return np.concatenate(parts, axis=-1)
