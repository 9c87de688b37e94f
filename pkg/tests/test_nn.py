import time

import numpy as np
import pytest

from permconv.autograd import Instance, central_differences, dense_oracle, relative_error
from permconv.filterops import PermutohedralKernel
from permconv.lattice import FeatureSet
from permconv.nn import (
    BCL,
    SGD,
    ReLU,
    Sequential,
    SpatialConv,
    TilesConfig,
    bcl_lattice,
    build_tiles_net,
    make_tiles,
    mse_loss,
    sgd_step,
    softmax,
    softmax_log_loss,
    tiles_features,
    train_tiles,
)


def _check_layer(layer, x, ctx=None, tol=1e-5, rng=None):
    """Finite-difference check of input and parameter gradients of sum(out * R)."""
    rng = np.random.default_rng(0) if rng is None else rng
    out = layer.forward(x, ctx)
    R = rng.normal(size=out.shape)
    layer.zero_grad()
    gx = layer.backward(R)
    analytic = {k: layer.grads[k].copy() for k in layer.params}

    def terms_x(z):
        return layer.forward(z, ctx) * R

    assert relative_error(gx, central_differences(terms_x, x)).max() < tol
    for k in layer.params:
        orig = layer.params[k].copy()

        def terms_p(p, k=k):
            layer.params[k][...] = p
            return layer.forward(x, ctx) * R

        numeric = central_differences(terms_p, orig)
        layer.params[k][...] = orig
        assert relative_error(analytic[k], numeric).max() < tol, k


def _image_lattice(img, s, pos=0.3, col=0.05):
    return bcl_lattice(tiles_features(img, pos, col), s)


class TestBCL:
    def test_one_pixel_matches_dense_oracle(self, rng):
        img = rng.uniform(size=(1, 1, 3))
        fs = tiles_features(img, 0.05, 0.04)
        layer = BCL(5, 1, 3, 2, rng, bias=False, density_scale=False)
        out = layer.forward(img, bcl_lattice(fs, 1))
        oracle = dense_oracle(Instance(fs, img.reshape(1, 3), layer.kernel))
        np.testing.assert_allclose(out.reshape(1, 2), oracle.output, rtol=1e-13)

    def test_one_pixel_central_weight(self, rng):
        img = rng.uniform(size=(1, 1, 3))
        fs = tiles_features(img, 0.05, 0.04)
        lat = bcl_lattice(fs, 0)
        layer = BCL(5, 0, 3, 1, rng, bias=False, density_scale=False)
        out = layer.forward(img, lat)
        b = lat.index.weights[0]
        expected = np.sum(b**2) * layer.params["weights"][0, :, 0] @ img.reshape(3)
        np.testing.assert_allclose(out.reshape(-1), expected, rtol=1e-13)

    def test_zero_kernel(self, rng):
        img = rng.uniform(size=(6, 6, 3))
        layer = BCL(5, 1, 3, 4, init="zero", bias=False)
        out = layer.forward(img, _image_lattice(img, 1))
        assert np.all(out == 0)
        layer.zero_grad()
        assert np.all(layer.backward(rng.normal(size=out.shape)) == 0)

    def test_gradients(self, rng):
        img = rng.uniform(size=(4, 4, 2))
        fs = FeatureSet(np.column_stack([np.mgrid[:4, :4].reshape(2, -1).T, img.reshape(-1, 2)]),
                        [0.6, 0.6, 2.0, 2.0])
        lat = bcl_lattice(fs, 1)
        _check_layer(BCL(4, 1, 2, 3, rng), img, lat)

    def test_requires_lattice(self, rng):
        with pytest.raises(ValueError):
            BCL(5, 1, 3, 2, rng).forward(np.zeros((2, 2, 3)))

    def test_gauss_init(self):
        layer = BCL(2, 1, 2, 1, init="gauss")
        np.testing.assert_allclose(layer.params["weights"].sum(), 1.0)

    def test_five_d_on_64x64(self, rng):
        img = rng.uniform(size=(64, 64, 3))
        lat = _image_lattice(img, 1, 0.05, 0.04)
        layer = BCL(5, 1, 3, 32, rng)
        t0 = time.perf_counter()
        out = layer.forward(img, lat)
        assert time.perf_counter() - t0 < 2.0
        assert out.shape == (64, 64, 32) and np.all(np.isfinite(out))
        assert lat.blur.neighbors.nbytes < 64 * 2**20


class TestSpatialLayers:
    def test_spatial_conv_gradients(self, rng):
        _check_layer(SpatialConv(2, 3, 3, rng), rng.normal(size=(5, 4, 2)))

    def test_spatial_conv_matches_direct(self, rng):
        layer = SpatialConv(1, 1, 3, rng, bias=False)
        x = rng.normal(size=(5, 5, 1))
        w = layer.params["weights"][:, :, 0, 0]
        xp = np.pad(x[:, :, 0], 1)
        direct = np.array([[np.sum(xp[i:i + 3, j:j + 3] * w) for j in range(5)] for i in range(5)])
        np.testing.assert_allclose(layer.forward(x)[:, :, 0], direct, rtol=1e-13)

    def test_spatial_conv_validation(self, rng):
        with pytest.raises(ValueError):
            SpatialConv(1, 1, 4, rng)
        with pytest.raises(ValueError):
            SpatialConv(2, 1, 3, rng).forward(np.zeros((3, 3, 1)))

    def test_relu(self):
        r = ReLU()
        assert r.forward(np.array([-1.0, 2.0])).tolist() == [0.0, 2.0]
        assert r.backward(np.array([5.0, 5.0])).tolist() == [0.0, 5.0]

    def test_sequential_gradients(self, rng):
        net = Sequential([SpatialConv(2, 3, 3, rng), ReLU(), SpatialConv(3, 2, 1, rng)])
        x = rng.normal(size=(4, 4, 2))
        out = net.forward(x)
        R = rng.normal(size=out.shape)
        net.zero_grad()
        gx = net.backward(R)
        assert relative_error(gx, central_differences(lambda z: net.forward(z) * R, x)).max() < 1e-5
        assert net.n_params() == (18 * 3 + 3) + (3 * 2 + 2)
        assert len(net.parameters()) == 4


class TestLosses:
    def test_uniform_logits(self):
        for L in (2, 3, 7):
            loss, _ = softmax_log_loss(np.zeros((5, L)), np.zeros(5, dtype=int))
            assert abs(loss - np.log(L)) < 1e-14

    def test_softmax_log_loss_gradient(self, rng):
        logits = rng.normal(size=(3, 4, 3))
        labels = rng.integers(0, 3, size=(3, 4))
        _, g = softmax_log_loss(logits, labels)
        numeric = central_differences(lambda z: softmax_log_loss(z, labels)[0], logits)
        assert relative_error(g, numeric).max() < 1e-5
        w = np.array([1.0, 2.0, 0.5])
        _, gw = softmax_log_loss(logits, labels, w)
        numeric = central_differences(lambda z: softmax_log_loss(z, labels, w)[0], logits)
        assert relative_error(gw, numeric).max() < 1e-5

    def test_label_range(self):
        with pytest.raises(ValueError):
            softmax_log_loss(np.zeros((2, 2)), np.array([0, 2]))
        with pytest.raises(ValueError):
            softmax_log_loss(np.zeros((2, 2)), np.array([0]))

    def test_mse(self, rng):
        a, b = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        loss, g = mse_loss(a, b)
        assert abs(loss - np.mean((a - b) ** 2)) < 1e-15
        numeric = central_differences(lambda z: mse_loss(z, b)[0], a)
        assert relative_error(g, numeric).max() < 1e-5
        with pytest.raises(ValueError):
            mse_loss(a, b[:2])

    def test_softmax_rows(self, rng):
        p = softmax(rng.normal(size=(10, 4)) * 50)
        np.testing.assert_allclose(p.sum(axis=1), 1)


class TestSGD:
    def test_zero_everything(self):
        p = np.array([1.5])
        sgd_step([p], [np.zeros(1)], [np.zeros(1)], lr=0.1, weight_decay=0.0)
        assert p[0] == 1.5

    def test_single_substitution(self):
        p, v = np.zeros(1), np.zeros(1)
        sgd_step([p], [np.ones(1)], [v], lr=1.0, weight_decay=0.0)
        assert p[0] == -1.0

    def test_momentum_two_steps(self):
        p, v = np.zeros(1), np.zeros(1)
        lr, g = 0.1, 2.0
        for _ in range(2):
            sgd_step([p], [np.full(1, g)], [v], lr=lr, weight_decay=0.0)
        np.testing.assert_allclose(p[0], -(1 + 1.9) * lr * g, rtol=1e-15)

    def test_weight_decay(self):
        p, v = np.array([2.0]), np.zeros(1)
        sgd_step([p], [np.zeros(1)], [v], lr=0.5)
        np.testing.assert_allclose(p[0], 2.0 - 0.5 * 0.0005 * 2.0)

    def test_class_matches_function(self, rng):
        layer = SpatialConv(1, 2, 3, rng)
        ref = [layer.params[k].copy() for k in layer.params]
        vel = [np.zeros_like(r) for r in ref]
        opt = SGD([(layer, k) for k in layer.params], lr=0.05)
        for _ in range(3):
            grads = [rng.normal(size=r.shape) for r in ref]
            for k, g in zip(layer.params, grads):
                layer.grads[k] = g.copy()
            opt.step()
            sgd_step(ref, grads, vel, lr=0.05)
        for k, r in zip(layer.params, ref):
            np.testing.assert_allclose(layer.params[k], r, rtol=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            sgd_step([np.zeros(2)], [np.zeros(3)], [np.zeros(2)], lr=0.1)

    def test_forward_backward_leaves_params(self, rng):
        layer = SpatialConv(2, 2, 3, rng)
        before = {k: v.copy() for k, v in layer.params.items()}
        layer.zero_grad()
        out = layer.forward(rng.normal(size=(3, 3, 2)))
        layer.backward(out)
        for k in before:
            assert np.array_equal(before[k], layer.params[k])


class TestTiles:
    def test_generator(self, rng):
        images, labels = make_tiles(20, rng)
        assert images.shape == (20, 64, 64, 3) and labels.shape == (20, 64, 64)
        assert np.all(labels.sum(axis=(1, 2)) == 400)
        assert np.all(labels[:, 0, :] == 0) and np.all(labels[:, -1, :] == 0)
        assert np.all(labels[:, :, 0] == 0) and np.all(labels[:, :, -1] == 0)
        assert images.min() >= 0 and images.max() <= 1

    def test_generator_seeded(self):
        a = make_tiles(3, np.random.default_rng(5))
        b = make_tiles(3, np.random.default_rng(5))
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_parameter_counts(self, rng):
        bnn = build_tiles_net(TilesConfig(variant="bnn"), rng).n_params()
        cnn = build_tiles_net(TilesConfig(variant="cnn"), rng).n_params()
        assert bnn == 40370 and cnn == 51890
        assert bnn < cnn

    @pytest.mark.parametrize("kw", [dict(variant="mlp"), dict(tile=63), dict(batch=0),
                                    dict(variant="cnn", kernel_size=4)])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            TilesConfig(**kw).validate()

    def test_pixel_classifier_near_chance(self):
        res = train_tiles(TilesConfig(variant="pixel", n_train=200, n_val=50, n_test=50,
                                      epochs=5, batch=20, seed=3))
        # a per-pixel color classifier cannot tell the random tile from the random background
        assert max(res.val_iou) < 0.35

    def test_bnn_loss_decreases(self):
        drops = []
        for seed in range(5):
            res = train_tiles(TilesConfig(n_train=40, n_val=5, n_test=5, epochs=3, batch=10,
                                          seed=seed))
            drops.append(res.train_loss[0] - res.train_loss[-1])
        assert np.median(drops) > 0
