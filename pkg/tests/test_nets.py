import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pyrsplat import nets
from pyrsplat.nets import Embeddings, Mlp

from conftest import rel_err


def zeroed(net: Mlp) -> Mlp:
    for w, b in zip(net.weights, net.biases):
        w[:] = 0.0
        b[:] = 0.0
    return net


class TestMlp:
    def test_linear_single_layer_backward(self, rng):
        net = Mlp([4, 3], rng)
        x = rng.normal(size=(5, 4))
        net.forward(x, cache=True)
        upstream = rng.normal(size=(5, 3))
        d_in, grads = net.backward(upstream)
        assert np.allclose(d_in, upstream @ net.weights[0].T)
        assert np.allclose(grads[0], x.T @ upstream)
        assert np.allclose(grads[1], upstream.sum(axis=0))

    def test_three_layer_fd(self, rng):
        net = Mlp([6, 64, 64, 4], rng)
        x = rng.normal(size=(3, 6))
        upstream = rng.normal(size=(3, 4))
        net.forward(x, cache=True)
        d_in, grads = net.backward(upstream)

        def loss():
            return float(np.sum(net.forward(x) * upstream))

        eps = 1e-6
        params = net.parameters() + [x]
        analytic = grads + [d_in]
        check = np.random.default_rng(0)
        for arr, grad in zip(params, analytic):
            flat = arr.reshape(-1)
            gflat = np.asarray(grad).reshape(-1)
            for i in check.choice(flat.size, size=min(25, flat.size), replace=False):
                old = flat[i]
                flat[i] = old + eps
                up = loss()
                flat[i] = old - eps
                down = loss()
                flat[i] = old
                fd = (up - down) / (2 * eps)
                if abs(fd) > 1e-7:
                    assert abs(gflat[i] - fd) / max(abs(fd), 1e-6) < 1e-6

    def test_zero_upstream_zero_grads(self, rng):
        net = Mlp([5, 64, 64, 2], rng)
        net.forward(rng.normal(size=(4, 5)), cache=True)
        d_in, grads = net.backward(np.zeros((4, 2)))
        assert np.allclose(d_in, 0.0)
        assert all(np.allclose(g, 0.0) for g in grads)

    def test_backward_without_forward_raises(self, rng):
        net = Mlp([3, 2], rng)
        with pytest.raises(RuntimeError):
            net.backward(np.zeros((1, 2)))


class TestSoftmax:
    @settings(deadline=None, max_examples=50)
    @given(st.integers(0, 2**32 - 1))
    def test_shift_invariance(self, seed):
        r = np.random.default_rng(seed)
        logits = r.normal(size=(4, 5)) * 10
        shifted = logits + r.normal() * 100
        assert np.allclose(nets.softmax(logits), nets.softmax(shifted), atol=1e-6)

    def test_backward_fd(self, rng):
        logits = rng.normal(size=(3, 4))
        up = rng.normal(size=(3, 4))
        probs = nets.softmax(logits)
        grad = nets.softmax_backward(probs, up)
        eps = 1e-7
        fd = np.zeros_like(logits)
        it = np.nditer(logits, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = logits[i]
            logits[i] = old + eps
            f_up = float(np.sum(nets.softmax(logits) * up))
            logits[i] = old - eps
            f_down = float(np.sum(nets.softmax(logits) * up))
            logits[i] = old
            fd[i] = (f_up - f_down) / (2 * eps)
        assert rel_err(grad, fd).max() < 1e-5


class TestWeighting:
    def test_zeroed_final_layer_uniform(self, rng):
        net = nets.make_weighting_net(3, embed_dim=8, rng=rng)
        net.weights[-1][:] = 0.0
        net.biases[-1][:] = 0.0
        w, _ = nets.weighting_forward(
            net, rng.normal(size=(5, 8)), rng.uniform(-1, 1, 3)
        )
        assert np.allclose(w, 1.0 / 3.0)

    def test_rows_sum_to_one(self, rng):
        net = nets.make_weighting_net(4, embed_dim=16, rng=rng)
        w, _ = nets.weighting_forward(
            net, rng.normal(size=(1000, 16)), rng.uniform(-1, 1, 3)
        )
        assert np.allclose(w.sum(axis=1), 1.0, atol=1e-6)
        assert (w > 0).all()

    def test_output_row_permutation(self, rng):
        net = nets.make_weighting_net(3, embed_dim=8, rng=rng)
        e = rng.normal(size=(7, 8))
        x = rng.uniform(-1, 1, 3)
        w, _ = nets.weighting_forward(net, e, x)
        perm = [2, 0, 1]
        net.weights[-1] = net.weights[-1][:, perm]
        net.biases[-1] = net.biases[-1][perm]
        w2, _ = nets.weighting_forward(net, e, x)
        assert np.allclose(w2, w[:, perm])

    def test_input_dimension(self, rng):
        net = nets.make_weighting_net(3, embed_dim=64, rng=rng)
        assert net.dims[0] == 64 + 27

    def test_gradient_reaches_embedding_and_net(self, rng):
        net = nets.make_weighting_net(3, embed_dim=8, rng=rng)
        e = rng.normal(size=(6, 8))
        w, cache = nets.weighting_forward(net, e, rng.uniform(-1, 1, 3),
                                          cache=True)
        d_e, grads = nets.weighting_backward(net, cache, rng.normal(size=w.shape))
        assert np.abs(d_e).max() > 0
        assert any(np.abs(g).max() > 0 for g in grads)


class TestColorCorrection:
    def test_zeroed_network(self, rng):
        net = zeroed(nets.make_correction_net(embed_dim=8, rng=rng))
        delta, _ = nets.color_correction(
            net, rng.normal(size=(4, 8)), rng.normal(size=8)
        )
        assert np.allclose(delta, 0.0)

    @settings(deadline=None, max_examples=25)
    @given(st.integers(0, 2**32 - 1))
    def test_range_bound(self, seed):
        r = np.random.default_rng(seed)
        net = nets.make_correction_net(embed_dim=8, rng=r)
        for w in net.weights:
            w *= 50.0  # drive the pre-activation hard
        delta, _ = nets.color_correction(
            net, r.normal(size=(16, 8)) * 10, r.normal(size=8) * 10
        )
        assert np.abs(delta).max() < 0.5

    def test_deterministic_and_camera_sensitive(self, rng):
        net = nets.make_correction_net(embed_dim=8, rng=rng)
        e = rng.normal(size=(5, 8))
        a1 = rng.normal(size=8)
        a2 = rng.normal(size=8)
        d1, _ = nets.color_correction(net, e, a1)
        d1_again, _ = nets.color_correction(net, e, a1.copy())
        d2, _ = nets.color_correction(net, e, a2)
        assert np.array_equal(d1, d1_again)
        assert not np.allclose(d1, d2)

    def test_gradient_reaches_both_embeddings(self, rng):
        net = nets.make_correction_net(embed_dim=8, rng=rng)
        e = rng.normal(size=(5, 8))
        row = rng.normal(size=8)
        delta, cache = nets.color_correction(net, e, row, cache=True)
        d_e, d_row, grads = nets.color_correction_backward(
            net, cache, rng.normal(size=delta.shape)
        )
        assert np.abs(d_e).max() > 0
        assert np.abs(d_row).max() > 0
        assert any(np.abs(g).max() > 0 for g in grads)

    def test_head_fd(self, rng):
        net = nets.make_correction_net(embed_dim=6, rng=rng)
        e = rng.normal(size=(3, 6))
        row = rng.normal(size=6)
        up = rng.normal(size=(3, 3))
        delta, cache = nets.color_correction(net, e, row, cache=True)
        d_e, d_row, grads = nets.color_correction_backward(net, cache, up)

        def loss():
            d, _ = nets.color_correction(net, e, row)
            return float(np.sum(d * up))

        eps = 1e-6
        check = np.random.default_rng(3)
        for arr, grad in [(e, d_e), (row[None], d_row[None])] + list(
            zip(net.parameters(), grads)
        ):
            flat = arr.reshape(-1)
            gflat = np.asarray(grad).reshape(-1)
            for i in check.choice(flat.size, size=min(15, flat.size), replace=False):
                old = flat[i]
                flat[i] = old + eps
                upv = loss()
                flat[i] = old - eps
                downv = loss()
                flat[i] = old
                fd = (upv - downv) / (2 * eps)
                if abs(fd) > 1e-7:
                    assert abs(gflat[i] - fd) / max(abs(fd), 1e-6) < 1e-6


class TestEmbeddings:
    def test_shapes_and_mean(self, rng):
        emb = Embeddings.create(10, 4, dim=16, rng=rng)
        assert emb.cluster.shape == (10, 16)
        assert emb.appearance.shape == (4, 16)
        assert np.allclose(emb.mean_appearance(), emb.appearance.mean(axis=0))

    def test_near_uniform_initial_weights(self, rng):
        # sigma-0.01 embeddings + fan-in init keep initial logits tiny, so
        # every level starts roughly equally trusted
        net = nets.make_weighting_net(3, embed_dim=64,
                                      rng=np.random.default_rng(5))
        emb = Embeddings.create(50, 2, rng=np.random.default_rng(6))
        w, _ = nets.weighting_forward(net, emb.cluster, np.zeros(3))
        assert np.abs(w - 1.0 / 3.0).max() < 0.2
