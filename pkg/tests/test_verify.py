import json
import math

import numpy as np
import pytest

from helpers import conv, make_spec
from pathscape.engine import Tensor, grad, init
from pathscape.verify import (
    bn_weight_scale_invariance, gradient_importance, lemma1_check, logit_function, mc_importance_over_inits,
    permutation_importance, path_sum_check, relu_check, topk_ablation,
)
from pathscape.verify.jacobian import draw_weights, sample0_squared_jacobian

RELU_NET = ([conv(3, 1, 4), {"type": "relu"}, conv(3, 4, 2), {"type": "flatten"},
             {"type": "dense", "c_in": 8, "c_out": 2}], [6, 6, 1])
LINEAR_NET = ([conv(3, 1, 2), conv(3, 2, 1), {"type": "flatten"}, {"type": "dense", "c_in": 4, "c_out": 2}],
              [6, 6, 1])


def gaussian_images(count=128, seed=0):
    return np.random.default_rng(seed).standard_normal((count, 1, 6, 6))


def engine_sample0_squared_jacobian(spec, weights, x, trial):
    """Same quantity as the forward-mode oracle, via the reverse-mode engine."""
    net = init(spec, 0, eps=0.0)
    for path, w in weights.items():
        net.params[f"{path}.weight"].data[...] = w[trial]
    xt = Tensor(x[trial], requires_grad=True)
    out = net.forward(xt)
    flat_size = int(np.prod(out.shape[1:]))
    total = np.zeros(x.shape[2:])
    for j in range(flat_size):
        select = np.zeros(out.shape)
        select.reshape(len(x[trial]), -1)[0, j] = 1.0
        (g,) = grad((out * Tensor(select)).sum(), [xt])
        total += g.data[0] ** 2
    return total / flat_size


class TestJacobianOracle:
    @pytest.mark.parametrize("layers,shape,batch", [
        ([conv(3, 1, 2), {"type": "relu"}, conv(2, 2, 2)], [6, 1], 1),
        ([conv(3, 1, 2, bias=False), {"type": "batchnorm"}, {"type": "relu"}, conv(3, 2, 1, bias=False),
          {"type": "batchnorm"}], [5, 5, 1], 4),
        ([conv(3, 1, 2), {"type": "residual", "inner": [conv(3, 2, 2, pad=1), {"type": "relu"}]}], [6, 1], 1),
        ([conv(3, 1, 2, stride=2, dilation=1), {"type": "flatten"}, {"type": "dense", "c_in": 6, "c_out": 3}],
         [7, 1], 1),
    ])
    def test_matches_reverse_mode_engine(self, layers, shape, batch):
        spec = make_spec(layers, shape)
        rng = np.random.default_rng(0)
        weights = draw_weights(spec, 3, rng)
        x = rng.standard_normal((3, batch, shape[-1], *shape[:-1]))
        oracle = sample0_squared_jacobian(spec, weights, x, training=True)
        for t in range(3):
            np.testing.assert_allclose(oracle[t], engine_sample0_squared_jacobian(spec, weights, x, t),
                                       rtol=1e-10, atol=1e-14)


class TestMonteCarloOverInits:
    def test_zero_variance_init(self):
        spec = make_spec([conv(3), conv(3)], [5, 1], init={"custom": [0.0, 0.0]})
        assert not mc_importance_over_inits(spec, 200, seed=0).mean.any()

    def test_two_layer_shape(self, two_layer_spec):
        report = path_sum_check(two_layer_spec, 20_000, seed=0)
        assert report.passed, report.max_deviation
        ratio = report.measured[0] / report.measured[0, 2]
        np.testing.assert_allclose(ratio * 3, [1, 2, 3, 2, 1], rtol=0.05)

    def test_stderr_shrinks_at_root_trials(self, two_layer_spec):
        trials = np.array([1000, 4000, 16000, 64000])
        rel = [mc_importance_over_inits(two_layer_spec, int(n), seed=2).relative_stderr()[0, 2] for n in trials]
        slope = np.polyfit(np.log(trials), np.log(rel), 1)[0]
        assert -0.55 <= slope <= -0.45

    def test_deterministic_and_thread_independent(self, two_layer_spec):
        a = mc_importance_over_inits(two_layer_spec, 5000, seed=7)
        b = mc_importance_over_inits(two_layer_spec, 5000, seed=7, threads=3)
        assert a.mean.tobytes() == b.mean.tobytes() and a.stderr.tobytes() == b.stderr.tobytes()
        c = mc_importance_over_inits(two_layer_spec, 5000, seed=8)
        assert a.mean.tobytes() != c.mean.tobytes()

    def test_relu_check_two_layers(self):
        spec = make_spec([conv(3, 1, 2, bias=False), {"type": "relu"}, conv(3, 2, 2, bias=False), {"type": "relu"},
                          conv(1, 2, 1, bias=False)], [7, 1])
        report = relu_check(spec, 100_000, seed=0)
        assert report.details["relu_layers"] == 2
        assert report.passed, report.details

    def test_report_serializes(self, two_layer_spec):
        report = path_sum_check(two_layer_spec, 500, seed=0)
        doc = json.loads(json.dumps(report.to_dict()))
        assert doc["claim"] == "linear-path-sum" and doc["trials"] == 500
        assert doc["passed"] == (doc["max_deviation"] <= doc["tolerance"])


class TestWeightScaleInvariance:
    def bn_spec(self, batchnorm=True):
        layers = [conv(3, 1, 2, bias=False)]
        if batchnorm:
            layers.append({"type": "batchnorm"})
        layers.append(conv(3, 2, 1, bias=False))
        if batchnorm:
            layers.append({"type": "batchnorm"})
        return make_spec(layers, [10, 1])

    def test_identical_scales_identical_fields(self):
        report = bn_weight_scale_invariance(self.bn_spec(), [1.0, 1.0], 300, seed=3)
        assert report.max_deviation == 0.0 and report.passed

    def test_invariant_with_batchnorm(self):
        report = bn_weight_scale_invariance(self.bn_spec(), [0.1, 1.0, 10.0], 500, seed=0, batch=32)
        assert report.passed, report.max_deviation

    def test_control_without_batchnorm_fails(self):
        report = bn_weight_scale_invariance(self.bn_spec(False), [0.1, 1.0, 10.0], 500, seed=0, batch=32)
        assert not report.passed
        for exponent in report.details["fitted_exponents"].values():
            assert exponent == pytest.approx(4.0, rel=0.10)


class TestPermutationImportance:
    def test_unread_location_is_zero(self, rng):
        images = rng.standard_normal((50, 3))

        def f(x):
            return x[:, 1] * 2.0

        assert permutation_importance(f, images, (0,), 20, seed=0) == pytest.approx(0.0, abs=1e-20)

    def test_identity_gives_population_variance(self, rng):
        images = rng.standard_normal((400, 2))
        value, stderr = permutation_importance(lambda x: x[:, 0], images, (0,), 100, seed=1, return_stderr=True)
        assert abs(value - images[:, 0].var()) < 5 * stderr

    def test_constant_location_warns(self):
        images = np.ones((10, 2))
        with pytest.warns(RuntimeWarning):
            assert permutation_importance(lambda x: x.sum(1), images, (0,), 10, seed=0) == 0.0

    def test_argument_checks(self, rng):
        with pytest.raises(ValueError):
            permutation_importance(lambda x: x[:, 0], rng.standard_normal((1, 2)), (0,), 10, 0)
        with pytest.raises(ValueError):
            permutation_importance(lambda x: x[:, 0], rng.standard_normal((5, 2)), (0,), 9, 0)

    def test_deterministic(self, rng):
        images = rng.standard_normal((30, 3))

        def f(x):
            return np.tanh(x).sum(1)

        assert permutation_importance(f, images, (1,), 20, 5) == permutation_importance(f, images, (1,), 20, 5)


class TestPermutationClaim:
    def test_linear_model_exact(self):
        net = init(make_spec(*LINEAR_NET), 0)
        report = lemma1_check(net, gaussian_images(), list(np.ndindex(1, 6, 6)), 50, seed=0, criterion="exact")
        assert report.passed, report.max_deviation

    def test_relu_model_correlation(self):
        net = init(make_spec(*RELU_NET), 1)
        report = lemma1_check(net, gaussian_images(), list(np.ndindex(1, 6, 6)), 50, seed=1)
        assert report.passed, report.details["pearson_r"]

    def test_pixel_variance_scaling(self):
        net = init(make_spec(*RELU_NET), 2)
        images = gaussian_images(256, seed=3)
        loc = (0, 2, 3)
        f = logit_function(net)
        base, base_err = permutation_importance(f, images, loc, 100, seed=4, return_stderr=True)
        scaled_images = images.copy()
        scaled_images[(slice(None),) + loc] *= 0.1
        scaled, scaled_err = permutation_importance(f, scaled_images, loc, 100, seed=4, return_stderr=True)
        grad_ratio = gradient_importance(net, scaled_images)[loc] / gradient_importance(net, images)[loc]
        ratio = scaled / base
        ratio_err = ratio * math.hypot(scaled_err / scaled, base_err / base)
        assert abs(ratio - grad_ratio) < 5 * ratio_err
        assert ratio == pytest.approx(0.01, rel=0.5)

    def test_too_few_locations(self):
        net = init(make_spec(*RELU_NET), 0)
        images = gaussian_images()
        images[:, 0, 0, :] = 1.0
        with pytest.raises(ValueError):
            lemma1_check(net, images, [(0, 0, 0), (0, 0, 1), (0, 1, 1)], 20, seed=0)

    def test_unknown_criterion(self):
        net = init(make_spec(*RELU_NET), 0)
        with pytest.raises(ValueError):
            lemma1_check(net, gaussian_images(16), list(np.ndindex(1, 2, 2)), 10, seed=0, criterion="vibes")


class TestTopKAblation:
    def test_zero_k_is_one_and_all_pixels_is_mean_image(self):
        net = init(make_spec(*RELU_NET), 0)
        images = gaussian_images(10)
        curve = topk_ablation(net, images, k_max=36)
        assert curve[0] == 1.0 and len(curve) == 37
        with net.mode(False):
            logits = net.logits(images).data
            cls = logits.argmax(1)
            mean_images = np.broadcast_to(images.mean(axis=(2, 3), keepdims=True), images.shape)
            mean_logits = net.logits(np.ascontiguousarray(mean_images)).data

        def softmax(z):
            e = np.exp(z - z.max(1, keepdims=True))
            return e / e.sum(1, keepdims=True)

        expected = np.mean(softmax(mean_logits)[np.arange(10), cls] / softmax(logits)[np.arange(10), cls])
        assert curve[-1] == pytest.approx(expected, rel=1e-12)

    def test_k_max_capped_at_area(self):
        net = init(make_spec(*RELU_NET), 0)
        assert len(topk_ablation(net, gaussian_images(4), k_max=1000)) == 37

    def test_first_step_removes_most_salient_pixel(self):
        net = init(make_spec(*RELU_NET), 0)
        images = gaussian_images(1)
        curve = topk_ablation(net, images, k_max=1)
        assert math.isfinite(curve[1]) and curve[1] > 0
