import numpy as np
import pytest

from pyrsplat import nets, synth
from pyrsplat.geom import Camera


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def simple_camera():
    return Camera(w2c=np.eye(4), fx=100.0, fy=100.0, cx=50.0, cy=50.0,
                  width=100, height=100)


def fd_gradient(fn, arr, eps=1e-6, indices=None):
    """Central finite differences of scalar fn wrt entries of arr (in place)."""
    flat = arr.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    out = np.zeros(len(list(indices)) if not hasattr(indices, "__len__") else len(indices))
    idx_list = list(indices)
    grads = np.zeros(len(idx_list))
    for j, i in enumerate(idx_list):
        old = flat[i]
        flat[i] = old + eps
        up = fn()
        flat[i] = old - eps
        down = fn()
        flat[i] = old
        grads[j] = (up - down) / (2.0 * eps)
    return idx_list, grads


def rel_err(analytic, numeric, floor=1e-5):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    return np.abs(analytic - numeric) / np.maximum(np.abs(numeric), floor)


@pytest.fixture
def small_scene_model(rng):
    """A well-conditioned little scene for rasterizer/train tests."""
    model = synth.random_scene_model(rng, n_gaussians=12, n_levels=2,
                                     n_clusters=3, scale_range=(-1.4, -0.7))
    model.embeddings = nets.Embeddings.create(3, 2, dim=8,
                                              rng=np.random.default_rng(11))
    model.weight_net = nets.make_weighting_net(2, embed_dim=8,
                                               rng=np.random.default_rng(12))
    model.correction_net = nets.make_correction_net(
        embed_dim=8, rng=np.random.default_rng(13))
    model.gaussians.opacity_logits = rng.uniform(-1.0, 0.8, size=12)
    return model
