"""Learnable embeddings and compact MLPs with explicit forward/backward.

Two heads ride on these primitives: the level-weighting network (cluster
embedding + encoded camera center -> softmax over pyramid levels) and the
color-correction network (cluster embedding + per-camera appearance
embedding -> bounded RGB offset).  The MLPs are tiny (a handful of K
forwards per frame), so everything is plain vectorized numpy with
hand-written gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geom

EMBED_DIM = 64
MLP_WIDTH = 64
MLP_LAYERS = 3
CAM_PE_FREQS = 4  # positional encoding of the camera center, input dim 27
CORR_SCALE = 0.5  # color offsets live in (-0.5, 0.5)


class Mlp:
    """Fully-connected ReLU network stored as explicit (weight, bias) layers.

    Hidden activations are ReLU; the output layer is linear (heads apply
    softmax / tanh themselves).  forward() can cache activations for a
    matching backward() call.
    """

    def __init__(self, dims: list[int], rng: np.random.Generator):
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            bound = np.sqrt(6.0 / fan_in)
            self.weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))
        self._cache: list[np.ndarray] | None = None

    @property
    def dims(self) -> list[int]:
        return [w.shape[0] for w in self.weights] + [self.weights[-1].shape[1]]

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def forward(self, x: np.ndarray, cache: bool = False) -> np.ndarray:
        """Apply the network to (N, in_dim) inputs."""
        acts = [x]
        h = x
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < len(self.weights) - 1:
                h = np.maximum(h, 0.0)
            acts.append(h)
        if cache:
            self._cache = acts
        return h

    def backward(self, d_out: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        """Exact reverse-mode gradients for the cached forward pass.

        Args:
            d_out: (N, out_dim) gradient wrt the network output.

        Returns:
            (d_input, grads) with grads ordered like parameters().
        """
        if self._cache is None:
            raise RuntimeError("backward() requires a forward(cache=True) pass")
        acts = self._cache
        grads_w = [np.empty(0)] * len(self.weights)
        grads_b = [np.empty(0)] * len(self.biases)
        d_h = d_out
        for i in reversed(range(len(self.weights))):
            if i < len(self.weights) - 1:
                d_h = d_h * (acts[i + 1] > 0.0)
            grads_w[i] = acts[i].T @ d_h
            grads_b[i] = d_h.sum(axis=0)
            d_h = d_h @ self.weights[i].T
        grads: list[np.ndarray] = []
        for gw, gb in zip(grads_w, grads_b):
            grads.extend((gw, gb))
        return d_h, grads


def make_weighting_net(levels: int, embed_dim: int = EMBED_DIM,
                       rng: np.random.Generator | None = None) -> Mlp:
    rng = rng or np.random.default_rng(0)
    in_dim = embed_dim + 3 + 6 * CAM_PE_FREQS
    return Mlp([in_dim, MLP_WIDTH, MLP_WIDTH, levels], rng)


def make_correction_net(embed_dim: int = EMBED_DIM,
                        rng: np.random.Generator | None = None) -> Mlp:
    return Mlp([2 * embed_dim, MLP_WIDTH, MLP_WIDTH, 3], rng or np.random.default_rng(1))


@dataclass
class Embeddings:
    """Cluster embeddings (K x D) and per-camera appearance embeddings (N_cam x D)."""

    cluster: np.ndarray
    appearance: np.ndarray

    @classmethod
    def create(cls, n_clusters: int, n_cameras: int, dim: int = EMBED_DIM,
               rng: np.random.Generator | None = None, sigma: float = 0.01
               ) -> "Embeddings":
        rng = rng or np.random.default_rng(2)
        return cls(
            cluster=rng.normal(0.0, sigma, size=(n_clusters, dim)),
            appearance=rng.normal(0.0, sigma, size=(n_cameras, dim)),
        )

    def mean_appearance(self) -> np.ndarray:
        """Appearance row used for cameras outside the training set."""
        return self.appearance.mean(axis=0)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(probs: np.ndarray, d_probs: np.ndarray) -> np.ndarray:
    dot = np.sum(d_probs * probs, axis=-1, keepdims=True)
    return probs * (d_probs - dot)


@dataclass
class WeightingCache:
    probs: np.ndarray
    embed_slice: slice


def weighting_forward(
    net: Mlp,
    cluster_embed: np.ndarray,
    x_cam_normalized: np.ndarray,
    cache: bool = False,
) -> tuple[np.ndarray, WeightingCache | None]:
    """Per-cluster softmax level weights for one camera position.

    Args:
        net: the weighting MLP.
        cluster_embed: (K, D) cluster embedding rows.
        x_cam_normalized: camera center already mapped into [-1, 1]^3.
        cache: keep activations for weighting_backward.

    Returns:
        ((K, L) weight rows summing to 1, optional backward cache).
    """
    k = cluster_embed.shape[0]
    pe = geom.positional_encoding(x_cam_normalized, CAM_PE_FREQS)
    x = np.concatenate([cluster_embed, np.broadcast_to(pe, (k, pe.shape[0]))], axis=1)
    logits = net.forward(x, cache=cache)
    probs = softmax(logits)
    if not cache:
        return probs, None
    return probs, WeightingCache(probs, slice(0, cluster_embed.shape[1]))


def weighting_backward(
    net: Mlp, wcache: WeightingCache, d_weights: np.ndarray
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Backward of weighting_forward.

    Returns:
        (d_cluster_embed (K, D), MLP parameter grads).
    """
    d_logits = softmax_backward(wcache.probs, d_weights)
    d_in, grads = net.backward(d_logits)
    return d_in[:, wcache.embed_slice], grads


@dataclass
class CorrectionCache:
    pre_tanh: np.ndarray
    embed_dim: int


def color_correction(
    net: Mlp,
    cluster_embed: np.ndarray,
    appearance_row: np.ndarray,
    cache: bool = False,
) -> tuple[np.ndarray, CorrectionCache | None]:
    """Bounded per-cluster RGB offsets for one camera.

    Args:
        cluster_embed: (K, D) rows.
        appearance_row: (D,) appearance embedding of the rendering camera.

    Returns:
        ((K, 3) offsets in (-0.5, 0.5), optional backward cache).
    """
    k, d = cluster_embed.shape
    x = np.concatenate(
        [cluster_embed, np.broadcast_to(appearance_row, (k, d))], axis=1
    )
    y = net.forward(x, cache=cache)
    delta = CORR_SCALE * np.tanh(y)
    if not cache:
        return delta, None
    return delta, CorrectionCache(y, d)


def color_correction_backward(
    net: Mlp, ccache: CorrectionCache, d_delta: np.ndarray
) -> tuple[np.ndarray, np.ndarray, list[np.ndarray]]:
    """Backward of color_correction.

    Returns:
        (d_cluster_embed (K, D), d_appearance_row (D,), MLP parameter grads).
    """
    th = np.tanh(ccache.pre_tanh)
    d_y = d_delta * CORR_SCALE * (1.0 - th * th)
    d_in, grads = net.backward(d_y)
    d = ccache.embed_dim
    return d_in[:, :d], d_in[:, d:].sum(axis=0), grads
