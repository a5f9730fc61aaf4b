import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from helpers import central_difference, conv, make_spec, naive_total_variation
from pathscape.engine import Tensor, grad, init
from pathscape.landscape import (
    NormalizationError, empirical_variance, importance_squared_exact, importance_squared_mc, laplacian,
    laplacian_energy, laplacian_kernel, loss_curvature, loss_target, normalize_to_2d, smoothness_target,
    total_variation,
)

positive_fields = arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(2, 6), st.integers(2, 6)),
                         elements=st.floats(0.0, 1e300))


def naive_laplacian_2d(field):
    """Five-point cross with replicate borders, written out per pixel."""
    h, w = field.shape
    out = np.zeros_like(field)
    for r in range(h):
        for c in range(w):
            up, down = field[max(r - 1, 0), c], field[min(r + 1, h - 1), c]
            left, right = field[r, max(c - 1, 0)], field[r, min(c + 1, w - 1)]
            out[r, c] = up + down + left + right - 4 * field[r, c]
    return out


def two_pass_variance(values):
    values = list(np.ravel(values))
    mean = sum(values) / len(values)
    return sum((v - mean) ** 2 for v in values) / (len(values) - 1)


class TestNormalize:
    @settings(max_examples=100, deadline=None)
    @given(field=positive_fields)
    def test_rms_is_one(self, field):
        if not field.any():
            return
        out = normalize_to_2d(field)
        d = out.size
        assert abs(np.sum(out**2) - d) < 1e-9 * d

    @settings(max_examples=50, deadline=None)
    @given(field=positive_fields, c=st.floats(1e-6, 1e6))
    def test_scale_equivariance(self, field, c):
        if not field.any() or not np.isfinite(c * field).all():
            return
        np.testing.assert_allclose(normalize_to_2d(c * field), normalize_to_2d(field), rtol=1e-9, atol=1e-9)

    def test_constant_field(self):
        np.testing.assert_allclose(normalize_to_2d(np.full((3, 4, 5), 2.5)), 1.0, rtol=1e-12)

    def test_single_pixel(self):
        field = np.zeros((1, 4, 4))
        field[0, 1, 2] = 7.0
        out = normalize_to_2d(field)
        assert out[1, 2] == pytest.approx(4.0)
        assert np.count_nonzero(out) == 1

    def test_channel_norm_numerator(self):
        field = np.zeros((2, 1, 2))
        field[:, 0, 0] = [3.0, 4.0]
        field[:, 0, 1] = [0.0, 5.0]
        np.testing.assert_allclose(normalize_to_2d(field), [[1.0, 1.0]])

    def test_rank1_strip(self, rng):
        out = normalize_to_2d(rng.random((2, 9)))
        assert out.shape == (9,)
        assert np.sum(out**2) == pytest.approx(9.0, rel=1e-12)

    def test_zero_field(self):
        with pytest.raises(NormalizationError):
            normalize_to_2d(np.zeros((1, 3, 3)))

    def test_tensor_input_stays_differentiable(self, rng):
        x = Tensor(rng.random((2, 3, 3)) + 0.1, requires_grad=True)
        (g,) = grad((normalize_to_2d(x) * Tensor(np.eye(3))).sum(), [x])
        assert g.shape == (2, 3, 3) and np.isfinite(g.data).all()


class TestLaplacian:
    def test_kernel_k3(self):
        assert laplacian_kernel(3).tolist() == [1.0, -2.0, 1.0]

    @pytest.mark.parametrize("k", [3, 5, 7])
    def test_kernel_annihilates_affine(self, k):
        kern = laplacian_kernel(k)
        offsets = np.arange(k) - k // 2
        assert kern.sum() == pytest.approx(0.0, abs=1e-15)
        assert (kern * offsets).sum() == pytest.approx(0.0, abs=1e-15)

    @pytest.mark.parametrize("k", [2, 4, 1])
    def test_even_or_small_width_rejected(self, k):
        with pytest.raises(ValueError):
            laplacian(np.zeros((4, 4)), k)

    def test_constant_field(self):
        assert not laplacian(np.full((5, 6), 3.0)).any()

    @pytest.mark.parametrize("k", [3, 5])
    def test_affine_field_exact_zero(self, k):
        r, c = np.meshgrid(np.arange(7.0), np.arange(9.0), indexing="ij")
        out = laplacian(2.0 * r - 3.0 * c + 1.0, k)
        margin = k // 2
        assert not out[margin:-margin, margin:-margin].any()
        ramp = laplacian(np.arange(8.0), k)
        assert not ramp[margin:-margin].any()

    def test_centered_delta_is_cross_stencil(self):
        field = np.zeros((5, 5))
        field[2, 2] = 1.0
        expected = np.zeros((5, 5))
        expected[2, 2] = -4.0
        expected[1, 2] = expected[3, 2] = expected[2, 1] = expected[2, 3] = 1.0
        np.testing.assert_array_equal(laplacian(field), expected)

    def test_rank1_delta(self):
        assert laplacian(np.array([0.0, 0.0, 1.0, 0.0, 0.0])).tolist() == [0.0, 1.0, -2.0, 1.0, 0.0]

    def test_matches_naive_oracle(self, rng):
        field = rng.standard_normal((6, 7))
        np.testing.assert_allclose(laplacian(field), naive_laplacian_2d(field), rtol=0, atol=1e-12)

    def test_rank3_rejected(self):
        with pytest.raises(ValueError):
            laplacian(np.zeros((2, 2, 2)))


class TestEnergyAndTV:
    def test_energy_constant_field(self):
        assert laplacian_energy(np.ones((4, 4))) == 0.0

    def test_energy_matches_two_pass_oracle(self, rng):
        for _ in range(10):
            field = rng.standard_normal((5, 6))
            assert abs(laplacian_energy(field) - two_pass_variance(naive_laplacian_2d(field))) < 1e-12

    def test_checkerboard_rougher_than_smoothed(self):
        r, c = np.indices((8, 8))
        board = np.where((r + c) % 2 == 0, 1.0, -1.0)
        smoothed = (board + np.roll(board, 1, 0) + np.roll(board, 1, 1) + np.roll(np.roll(board, 1, 0), 1, 1)) / 4
        smoothed = 0.5 * board + 0.5 * smoothed
        assert laplacian_energy(board) > laplacian_energy(smoothed)

    def test_variance_needs_two_entries(self):
        with pytest.raises(ValueError):
            empirical_variance(np.ones(1))

    def test_tv_examples(self):
        assert total_variation(np.zeros((3, 3))) == 0.0
        assert total_variation(np.array([0.0, 1.0, 0.0])) == 1.0

    def test_tv_matches_naive_oracle(self, rng):
        for shape in [(5, 5), (3, 8), (1, 6), (6, 1)]:
            field = rng.standard_normal(shape)
            assert abs(total_variation(field) - naive_total_variation(field)) < 1e-12

    def test_tv_single_entry_rejected(self):
        with pytest.raises(ValueError):
            total_variation(np.ones((1, 1)))


class TestSmoothnessTarget:
    def test_single_image_equals_its_normalized_laplacian(self, rng):
        image = rng.standard_normal((1, 1, 6, 6))
        lap = np.abs(naive_laplacian_2d(image[0, 0]))
        expected = 6 * lap / np.sqrt(np.sum(lap**2))
        np.testing.assert_allclose(smoothness_target(image), expected, rtol=1e-12)

    def test_rms_one_per_image(self, rng):
        out = smoothness_target(rng.standard_normal((1, 3, 5, 5)))
        assert np.sum(out**2) == pytest.approx(25.0, rel=1e-12)

    def test_order_invariance(self, rng):
        images = rng.standard_normal((6, 2, 5, 5))
        np.testing.assert_allclose(smoothness_target(images), smoothness_target(images[::-1]), rtol=1e-12)

    def test_ramps_only_respond_at_borders(self):
        r, c = np.indices((6, 6)).astype(float)
        images = np.stack([(r + 2 * c)[None], (3 * r - c)[None]])
        out = smoothness_target(images)
        assert not out[1:-1, 1:-1].any()
        assert out.any()

    def test_flat_images_skipped_with_warning(self, rng):
        images = np.concatenate([np.ones((2, 1, 4, 4)), rng.standard_normal((1, 1, 4, 4))])
        with pytest.warns(RuntimeWarning, match="skipped 2"):
            out = smoothness_target(images)
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            np.testing.assert_allclose(out, smoothness_target(images[2:]))

    def test_all_flat_raises(self):
        with pytest.warns(RuntimeWarning), pytest.raises(NormalizationError):
            smoothness_target(np.ones((2, 1, 4, 4)))

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            smoothness_target(np.zeros((0, 1, 4, 4)))


class TestLosses:
    def test_target_loss_zero_on_match(self, rng):
        s = rng.random((4, 4))
        assert loss_target(s, s) == 0.0
        assert loss_target(np.ones((3, 3)), np.ones((3, 3))) == 0.0

    def test_target_shape_mismatch(self):
        with pytest.raises(ValueError):
            loss_target(np.ones((3, 3)), np.ones((3, 4)))

    def test_curvature_uniform_landscape(self):
        assert loss_curvature(np.ones((5, 5))) == 0.0

    def test_curvature_is_laplacian_energy(self, rng):
        field = rng.random((5, 5))
        assert loss_curvature(field, 5) == laplacian_energy(field, 5)


TINY_NETS = [
    ([conv(3, 1, 2), {"type": "relu"}, conv(3, 2, 2), {"type": "flatten"}, {"type": "dense", "c_in": 2, "c_out": 3}],
     [5, 5, 1]),
    ([conv(3, 1, 3, pad=1), {"type": "batchnorm"}, {"type": "relu"}, conv(3, 3, 2)], [6, 6, 1]),
]


def _perturbed(spec, seed):
    net = init(spec, seed)
    rng = np.random.default_rng(seed + 100)
    for p in net.parameters():
        p.data += 0.3 * rng.standard_normal(p.shape)
    net.buffers = {k: v + 0.1 * np.abs(rng.standard_normal(v.shape)) for k, v in net.buffers.items()}
    return net


def _landscape_loss(net, images, kind, target, create_graph):
    field = importance_squared_exact(net, images, create_graph=create_graph)
    flat = normalize_to_2d(field)
    return loss_curvature(flat) if kind == "curvature" else loss_target(flat, target)


class TestLossGradients:
    @pytest.mark.parametrize("kind", ["curvature", "target"])
    @pytest.mark.parametrize("index", range(len(TINY_NETS)))
    def test_matches_finite_differences(self, kind, index):
        layers, shape = TINY_NETS[index]
        spec = make_spec(layers, shape)
        net = _perturbed(spec, index)
        rng = np.random.default_rng(index)
        images = rng.standard_normal((4, 1, *shape[:2]))
        target = smoothness_target(images)
        loss = _landscape_loss(net, images, kind, target, True)
        grads = grad(loss, net.parameters())
        numeric = central_difference(lambda: float(_landscape_loss(net, images, kind, target, False)),
                                     [p.data for p in net.parameters()], eps=1e-5)
        for g, n in zip(grads, numeric):
            scale = max(np.abs(n).max(), 1e-8)
            np.testing.assert_allclose(g.data, n, rtol=1e-3, atol=1e-3 * scale)


def _linear_net(weights):
    spec = make_spec([{"type": "flatten"}, {"type": "dense", "c_in": 3, "c_out": len(weights), "bias": False}], [3, 1])
    net = init(spec, 0)
    net.params["1.weight"].data[:] = np.asarray(weights).reshape(net.params["1.weight"].shape)
    return net


class TestEstimators:
    def test_zero_weights_give_zero_field(self):
        net = init(make_spec([conv(3, 1, 2), {"type": "flatten"}, {"type": "dense", "c_in": 6, "c_out": 2}], [5, 1],
                             init={"custom": [0.0, 0.0]}), 0)
        assert not importance_squared_exact(net, np.ones((3, 1, 5))).values.any()

    def test_linear_model_closed_form(self, rng):
        w = rng.standard_normal((2, 3))
        net = _linear_net(w)
        x = rng.standard_normal((5, 1, 3))
        logits = x.reshape(5, 3) @ w.T
        p = np.exp(logits - logits.max(1, keepdims=True))
        p /= p.sum(1, keepdims=True)
        expected = (p @ w**2).mean(0).reshape(1, 3)
        np.testing.assert_allclose(importance_squared_exact(net, x).values, expected, rtol=1e-12)

    def test_single_class_mc_equals_exact(self, rng):
        net = _linear_net(rng.standard_normal((1, 3)))
        x = rng.standard_normal((4, 1, 3))
        mc = importance_squared_mc(net, x, np.random.default_rng(0))
        np.testing.assert_allclose(mc.values, importance_squared_exact(net, x).values, rtol=1e-12)
        assert mc.estimator == "monte_carlo" and mc.count == 4

    def test_mc_deterministic_per_seed(self, rng):
        net = init(TINY_NETS_SPEC(), 1)
        x = rng.standard_normal((6, 1, 5, 5))
        a = importance_squared_mc(net, x, np.random.default_rng(3)).values
        b = importance_squared_mc(net, x, np.random.default_rng(3)).values
        assert a.tobytes() == b.tobytes()

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError):
            importance_squared_exact(init(TINY_NETS_SPEC(), 0), np.zeros((0, 1, 5, 5)))

    def test_batched_exact_matches_single_chunk(self, rng):
        net = _perturbed(TINY_NETS_SPEC(), 2)
        x = rng.standard_normal((7, 1, 5, 5))
        np.testing.assert_allclose(importance_squared_exact(net, x, batch_size=3).values,
                                   importance_squared_exact(net, x, batch_size=100).values, rtol=1e-12)

    def test_mc_converges_at_root_n_rate(self):
        net = _perturbed(TINY_NETS_SPEC(), 5)
        x = np.random.default_rng(8).standard_normal((8, 1, 5, 5))
        exact = importance_squared_exact(net, x).values
        rng = np.random.default_rng(9)
        draws = np.stack([importance_squared_mc(net, x, rng).values for _ in range(1280)])
        sizes = np.array([10, 40, 160, 640])
        errors = []
        for n in sizes:
            reps = draws[: (len(draws) // n) * n].reshape(-1, n, *exact.shape).mean(axis=1)
            errors.append(np.sqrt(np.mean((reps - exact) ** 2)))
        slope = np.polyfit(np.log(sizes), np.log(errors), 1)[0]
        assert -0.6 <= slope <= -0.4
        mean = draws.mean(0)
        stderr = draws.std(0, ddof=1) / math.sqrt(len(draws))
        # entries with zero spread are exact; the rest should sit within 3 standard errors
        within = np.abs(mean - exact) <= 3 * stderr + 1e-15
        assert within.mean() >= 0.95


def TINY_NETS_SPEC():
    return make_spec(*TINY_NETS[0])
