import numpy as np
import pytest

from permconv.autograd import (
    Instance,
    backward_kernel,
    backward_signal,
    central_differences,
    dense_oracle,
    forward,
    grad_check,
    random_instance,
    relative_error,
)
from permconv.filterops import PermutohedralKernel, build_blur_matrix, gaussian_kernel, identity_kernel
from permconv.lattice import FeatureSet, InvalidInputError, build_index, build_joint_index


def _run(inst, normalize=False):
    idx_in, idx_out = inst.indices()
    return forward(idx_in, idx_out, inst.signal, inst.kernel, normalize=normalize)


class TestBackwardSignal:
    def test_zero_grad(self, rng):
        inst = random_instance(rng, 2, 1, 10, 2, 3)
        out, tape = _run(inst)
        assert np.all(backward_signal(tape, np.zeros_like(out)) == 0)

    def test_identity_self_adjoint(self, rng):
        fs = FeatureSet(rng.normal(size=(15, 3)), np.ones(3))
        idx = build_index(fs)
        k = identity_kernel(3, 1, 2)
        v = rng.normal(size=(15, 2))
        g = rng.normal(size=(15, 2))
        _, tape = forward(idx, idx, v, k)
        fwd_g, _ = forward(idx, idx, g, k)
        np.testing.assert_allclose(backward_signal(tape, g), fwd_g, rtol=0, atol=1e-13)

    def test_finite_differences(self, rng):
        inst = random_instance(rng, 2, 1, 10, 2, 2)
        report = grad_check(inst, tolerance=1e-6)
        assert report.signal_error < 1e-6, report

    def test_shape_mismatch(self, rng):
        inst = random_instance(rng, 2, 1, 6, 1, 2)
        _, tape = _run(inst)
        with pytest.raises(InvalidInputError):
            backward_signal(tape, np.zeros((6, 3)))


class TestBackwardKernel:
    def test_zero_signal(self, rng):
        inst = random_instance(rng, 3, 2, 12, 2, 2)
        inst.signal = np.zeros_like(inst.signal)
        out, tape = _run(inst)
        assert np.all(backward_kernel(tape, rng.normal(size=out.shape)) == 0)

    def test_zero_grad(self, rng):
        inst = random_instance(rng, 3, 1, 12, 2, 2)
        out, tape = _run(inst)
        g = backward_kernel(tape, np.zeros_like(out))
        assert g.shape == inst.kernel.weights.shape and np.all(g == 0)

    def test_finite_differences(self, rng):
        inst = random_instance(rng, 2, 2, 12, 2, 3)
        report = grad_check(inst, tolerance=1e-6)
        assert report.kernel_error < 1e-6, report


class TestGradCheck:
    def test_identity_kernel_tight(self, rng):
        inst = random_instance(rng, 2, 1, 10, 2, 2)
        inst.kernel = identity_kernel(2, 1, 2)
        assert grad_check(inst, tolerance=1e-8).passed

    def test_random_d3(self, rng):
        inst = random_instance(rng, 3, 1, 20, 2, 2)
        report = grad_check(inst, tolerance=1e-5)
        assert report.passed, report

    def test_float64_differencing(self, rng):
        inst = random_instance(rng, 2, 1, 10, 1, 1)
        assert grad_check(inst, tolerance=1e-5, extended=False).passed

    def test_corrupted_gradient_fails(self, rng):
        inst = random_instance(rng, 2, 1, 10, 1, 2)
        out, tape = _run(inst)
        g = out - inst.target
        gv, gw = backward_signal(tape, g), backward_kernel(tape, g)
        gw = gw.copy()
        gw[0, 0, 3] += 1e-3
        report = grad_check(inst, tolerance=1e-5, analytic=(gv, gw))
        assert not report.passed
        assert "FAIL" in str(report)

    def test_joint_points(self, rng):
        inst = random_instance(rng, 2, 1, 10, 2, 2, n_out=6)
        assert grad_check(inst).passed


class TestDenseOracle:
    @pytest.mark.parametrize("d,s", [(1, 1), (2, 1), (2, 2), (3, 2)])
    def test_forward_and_gradients(self, d, s, rng):
        inst = random_instance(rng, d, s, 12, 2, 2, n_out=9)
        idx_in, idx_out = inst.indices()
        out, tape = forward(idx_in, idx_out, inst.signal, inst.kernel)
        oracle = dense_oracle(inst)
        np.testing.assert_allclose(out, oracle.output, rtol=0, atol=1e-10)
        g = out - inst.target
        np.testing.assert_allclose(backward_signal(tape, g), oracle.grad_signal, rtol=0, atol=1e-10)
        np.testing.assert_allclose(backward_kernel(tape, g), oracle.grad_kernel, rtol=0, atol=1e-10)

    def test_zero_signal(self, rng):
        inst = random_instance(rng, 2, 1, 8)
        inst.signal = np.zeros_like(inst.signal)
        oracle = dense_oracle(inst, grad_out=np.zeros((8, 1)))
        assert np.all(oracle.output == 0)
        assert np.all(oracle.grad_signal == 0) and np.all(oracle.grad_kernel == 0)

    @pytest.mark.parametrize("d", [1, 2, 4])
    def test_single_point(self, d, rng):
        # without neighbors (s = 0) the response is sum_j b_j^2 times the central weight
        fs = FeatureSet(rng.normal(size=(1, d)), np.ones(d))
        k = PermutohedralKernel(d, 0, np.array([1.7]))
        inst = Instance(fs, np.array([[2.0]]), k)
        oracle = dense_oracle(inst)
        b = build_index(fs).weights[0]
        expected = np.sum(b**2) * 1.7 * 2.0
        np.testing.assert_allclose(oracle.output[0, 0], expected, rtol=1e-14)
        out, _ = _run(inst)
        np.testing.assert_allclose(out[0, 0], expected, rtol=1e-14)

    def test_size_guard(self, rng):
        inst = random_instance(rng, 3, 1, 400, spread=20.0)
        with pytest.raises(ValueError):
            dense_oracle(inst)


class TestProperties:
    @pytest.mark.parametrize("seed", range(5))
    def test_adjoint_identity(self, seed):
        rng = np.random.default_rng(seed)
        d, s = int(rng.integers(1, 5)), int(rng.integers(1, 3))
        inst = random_instance(rng, d, s, 20, 2, 3, n_out=11)
        out, tape = _run(inst)
        g = rng.normal(size=out.shape)
        lhs = np.sum(out * g)
        rhs = np.sum(inst.signal * backward_signal(tape, g))
        assert abs(lhs - rhs) < 1e-9 * max(1.0, abs(lhs))

    def test_normalized_treats_normalizer_as_constant(self, rng):
        inst = random_instance(rng, 2, 1, 10, 1, 1)
        idx, _ = inst.indices()
        blur = build_blur_matrix(idx, 1)
        _, tape = forward(idx, idx, inst.signal, inst.kernel, blur, normalize=True)
        fixed = tape.normalizer

        def loss(v):
            out, _ = forward(idx, idx, v, inst.kernel, blur, normalize=True, normalizer=fixed)
            return 0.5 * (out - inst.target) ** 2

        out, tape = forward(idx, idx, inst.signal, inst.kernel, blur, normalize=True, normalizer=fixed)
        analytic = backward_signal(tape, out - inst.target)
        numeric = central_differences(loss, inst.signal)
        assert relative_error(analytic, numeric).max() < 1e-5

    def test_chain_of_two_filters(self, rng):
        f1 = FeatureSet(rng.uniform(0, 2, size=(12, 2)), [1.0, 1.2])
        f2 = FeatureSet(rng.uniform(0, 2, size=(12, 3)), [0.9, 1.0, 1.1])
        i1, i2 = build_index(f1), build_index(f2)
        k1 = PermutohedralKernel(2, 1, rng.normal(size=(3, 2, 7)))
        k2 = PermutohedralKernel(3, 1, rng.normal(size=(1, 3, 15)))
        v = rng.normal(size=(12, 2))
        target = rng.normal(size=(12, 1))

        def terms(v, w1):
            h, _ = forward(i1, i1, v, PermutohedralKernel(2, 1, w1))
            out, _ = forward(i2, i2, h, k2)
            return 0.5 * (out - target) ** 2

        h, t1 = forward(i1, i1, v, k1)
        out, t2 = forward(i2, i2, h, k2)
        gh = backward_signal(t2, out - target)
        gv = backward_signal(t1, gh)
        gw1 = backward_kernel(t1, gh)
        nv = central_differences(lambda x: terms(x, k1.weights), v)
        nw = central_differences(lambda w: terms(v, w), k1.weights)
        assert relative_error(gv, nv).max() < 1e-5
        assert relative_error(gw1, nw).max() < 1e-5

    def test_joint_index_requires_shared_table(self, rng):
        fa = FeatureSet(rng.normal(size=(5, 2)), [1.0, 1.0])
        fb = FeatureSet(rng.normal(size=(5, 2)), [1.0, 1.0])
        with pytest.raises(InvalidInputError):
            forward(build_index(fa), build_index(fb), np.zeros(5), gaussian_kernel(2, 1))
        ia, ib = build_joint_index(fa, fb)
        out, _ = forward(ia, ib, np.ones(5), gaussian_kernel(2, 1))
        assert out.shape == (5, 1)
