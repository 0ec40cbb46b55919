import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chromabrush.errors import CaptureError, ConfigError, ShapeError
from chromabrush.styleloss import (
    LossTargets,
    LossWeights,
    content_loss_grad,
    feature_matrix,
    gram,
    style_layer_loss_grad,
    total_loss_grad,
    total_style_loss,
)
from chromabrush.tensorcore import Tensor, tensor_new
from oracles import (
    central_diff,
    content_loss_oracle,
    gram_oracle,
    max_rel_err,
    style_layer_loss_oracle,
)


class TestGram:
    def test_zero_features(self):
        assert np.all(gram(tensor_new((3, 5), 0.0)).array == 0.0)

    def test_example(self):
        g = gram(Tensor([[1.0, 2.0], [3.0, 4.0]]))
        assert np.array_equal(gram_oracle([[1, 2], [3, 4]]), [[5, 11], [11, 25]])
        assert np.allclose(g.array, [[5, 11], [11, 25]], rtol=1e-13, atol=0)

    def test_single_row(self):
        r = [1.0, -2.0, 0.5]
        g = gram(Tensor([r]))
        assert g.shape == (1, 1)
        assert g.array[0, 0] == pytest.approx(sum(v * v for v in r), rel=1e-13)

    def test_random_against_oracle(self):
        rng = np.random.default_rng(17)
        for _ in range(10):
            n, m = rng.integers(1, 8, size=2)
            f = rng.normal(size=(n, m))
            assert np.allclose(
                gram(Tensor(f)).array, gram_oracle(f), rtol=1e-12, atol=1e-12
            )

    def test_exact_symmetry(self):
        rng = np.random.default_rng(23)
        g = gram(Tensor(rng.normal(size=(7, 13)))).array
        assert np.max(np.abs(g - g.T)) == 0.0

    def test_positive_semidefinite(self):
        rng = np.random.default_rng(29)
        g = gram(Tensor(rng.normal(size=(6, 9)))).array
        eigs = np.linalg.eigvalsh(g)
        assert eigs.min() >= -1e-10 * np.trace(g)

    @settings(deadline=None, max_examples=30)
    @given(st.sampled_from([-2.0, 0.5, 3.0]), st.integers(0, 10_000))
    def test_quadratic_scaling(self, c, seed):
        rng = np.random.default_rng(seed)
        f = rng.normal(size=(3, 4))
        lhs = gram(Tensor(c * f)).array
        rhs = c * c * gram(Tensor(f)).array
        assert max_rel_err(lhs, rhs, floor=1e-9) < 1e-12


class TestContentLoss:
    def test_perfect_reconstruction(self):
        f = Tensor(np.random.default_rng(1).normal(size=(3, 4)))
        loss, grad = content_loss_grad(f, f)
        assert loss == 0.0
        assert np.all(grad.array == 0.0)

    def test_example(self):
        p = Tensor([[1.0, 0.0], [0.0, 1.0]])
        f = Tensor([[0.0, 1.0], [1.0, 0.0]])
        loss, grad = content_loss_grad(p, f)
        assert loss == content_loss_oracle(p.array, f.array) == 2.0
        assert np.array_equal(grad.array, [[-1, 1], [1, -1]])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            content_loss_grad(tensor_new((2, 3), 0.0), tensor_new((3, 2), 0.0))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(31)
        p = rng.normal(size=(4, 6))
        f0 = rng.normal(size=(4, 6))
        _, grad = content_loss_grad(Tensor(p), Tensor(f0))
        numeric = central_diff(
            lambda f: content_loss_grad(Tensor(p), Tensor(f))[0], f0.copy(), 1e-6
        )
        assert max_rel_err(grad.array, numeric) < 1e-8


class TestStyleLayerLoss:
    def test_matched_style(self):
        f = Tensor(np.random.default_rng(2).normal(size=(3, 5)))
        loss, grad = style_layer_loss_grad(gram(f), f)
        assert loss == 0.0
        assert np.all(grad.array == 0.0)

    def test_example_value(self):
        f = Tensor([[1.0, 2.0], [3.0, 4.0]])
        a = tensor_new((2, 2), 0.0)
        loss, _ = style_layer_loss_grad(a, f)
        assert style_layer_loss_oracle(a.array, f.array) == pytest.approx(13.9375)
        assert loss == pytest.approx(892.0 / 64.0, rel=1e-13)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            style_layer_loss_grad(tensor_new((3, 3), 0.0), tensor_new((2, 5), 0.0))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(37)
        a = gram(Tensor(rng.normal(size=(3, 5))))
        f0 = rng.normal(size=(3, 5))
        _, grad = style_layer_loss_grad(a, Tensor(f0))
        numeric = central_diff(
            lambda f: style_layer_loss_grad(a, Tensor(f))[0], f0.copy(), 1e-6
        )
        assert max_rel_err(grad.array, numeric) < 1e-7


class TestTotalStyleLoss:
    def test_all_zero(self):
        layers = {f"l{i}": 0.0 for i in range(5)}
        weights = {k: 0.2 for k in layers}
        assert total_style_loss(layers, weights) == 0.0

    def test_uniform_weights_example(self):
        layers = {f"l{i}": 13.9375 for i in range(5)}
        weights = {k: 1.0 / 5.0 for k in layers}
        assert total_style_loss(layers, weights) == pytest.approx(13.9375, rel=1e-13)

    def test_weighted_sum_example(self):
        assert total_style_loss(
            {"a": 2.0, "b": 4.0}, {"a": 0.75, "b": 0.25}
        ) == pytest.approx(2.5, rel=1e-14)

    def test_key_mismatch(self):
        with pytest.raises(ConfigError):
            total_style_loss({"a": 1.0}, {"b": 1.0})


def _random_setup(rng, n_layers=2):
    """Small random targets/features pair over fake layer names."""
    features = {}
    style_targets = {}
    layer_weights = {}
    names = [f"s{i}" for i in range(n_layers)]
    for name in names:
        n, m = int(rng.integers(2, 5)), int(rng.integers(2, 6))
        features[name] = Tensor(rng.normal(size=(n, m)))
        style_targets[name] = gram(Tensor(rng.normal(size=(n, m))))
        layer_weights[name] = float(rng.uniform(0.1, 1.0))
    content_layer = names[0]
    targets = LossTargets(
        content_layer,
        Tensor(rng.normal(size=features[content_layer].shape)),
        style_targets,
    )
    return targets, features, layer_weights


class TestTotalLoss:
    def test_composition_example(self):
        # alpha=1, beta=2 with content_part 2 and style_part 13.9375.
        p = Tensor([[1.0, 0.0], [0.0, 1.0]])
        f_content = Tensor([[0.0, 1.0], [1.0, 0.0]])
        f_style = Tensor([[1.0, 2.0], [3.0, 4.0]])
        targets = LossTargets("c", p, {"s": tensor_new((2, 2), 0.0)})
        features = {"c": f_content, "s": f_style}
        weights = LossWeights(1.0, 2.0, {"s": 1.0})
        out = total_loss_grad(targets, features, weights)
        assert out.content_part == pytest.approx(2.0)
        assert out.style_part == pytest.approx(13.9375)
        assert out.loss == pytest.approx(29.875, rel=1e-13)
        assert out.loss == weights.alpha * out.content_part + weights.beta * out.style_part

    def test_content_only(self):
        rng = np.random.default_rng(5)
        targets, features, lw = _random_setup(rng)
        weights = LossWeights(2.0, 0.0, lw)
        out = total_loss_grad(targets, features, weights)
        assert out.loss == 2.0 * out.content_part
        for name in lw:
            if name != targets.content_layer:
                assert np.all(out.feature_grads[name].array == 0.0)

    def test_style_only_perfect_match(self):
        rng = np.random.default_rng(6)
        features = {f"s{i}": Tensor(rng.normal(size=(3, 4))) for i in range(2)}
        targets = LossTargets(
            "s0",
            Tensor(rng.normal(size=(3, 4))),
            {k: gram(v) for k, v in features.items()},
        )
        weights = LossWeights(0.0, 3.0, {"s0": 0.5, "s1": 0.5})
        out = total_loss_grad(targets, features, weights)
        assert out.loss == 0.0
        assert out.style_part == 0.0

    def test_missing_layer_raises(self):
        rng = np.random.default_rng(7)
        targets, features, lw = _random_setup(rng)
        features.pop("s1")
        with pytest.raises(CaptureError):
            total_loss_grad(targets, features, LossWeights(1.0, 1.0, lw))

    def test_linearity_in_alpha_beta(self):
        rng = np.random.default_rng(8)
        targets, features, lw = _random_setup(rng, n_layers=3)
        w1 = LossWeights(0.7, 1.3, lw)
        w2 = LossWeights(1.4, 2.6, lw)
        out1 = total_loss_grad(targets, features, w1)
        out2 = total_loss_grad(targets, features, w2)
        assert out2.loss == 2.0 * out1.loss
        for name in out1.feature_grads:
            assert np.array_equal(
                out2.feature_grads[name].array, 2.0 * out1.feature_grads[name].array
            )

    def test_accumulates_when_content_is_style_layer(self):
        rng = np.random.default_rng(9)
        f = Tensor(rng.normal(size=(3, 4)))
        targets = LossTargets(
            "s0", Tensor(rng.normal(size=(3, 4))), {"s0": gram(Tensor(rng.normal(size=(3, 4))))}
        )
        features = {"s0": f}
        weights = LossWeights(1.0, 1.0, {"s0": 1.0})
        out = total_loss_grad(targets, features, weights)
        _, cg = content_loss_grad(targets.content_target, f)
        _, sg = style_layer_loss_grad(targets.style_targets["s0"], f)
        assert np.allclose(
            out.feature_grads["s0"].array, cg.array + sg.array, rtol=1e-12, atol=0
        )

    def test_reshapes_grads_to_feature_shape(self):
        rng = np.random.default_rng(10)
        chw = Tensor(rng.normal(size=(3, 4, 2)))
        targets = LossTargets(
            "c", feature_matrix(Tensor(rng.normal(size=(3, 4, 2)))),
            {"c": gram(feature_matrix(Tensor(rng.normal(size=(3, 4, 2)))))},
        )
        out = total_loss_grad(
            targets, {"c": chw}, LossWeights(1.0, 1.0, {"c": 1.0})
        )
        assert out.feature_grads["c"].shape == (3, 4, 2)

    def test_full_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        targets, features, lw = _random_setup(rng, n_layers=2)
        weights = LossWeights(0.8, 2.5, lw)
        out = total_loss_grad(targets, features, weights)
        for name, feat in features.items():
            f0 = np.array(feat.array)

            def scalar(f, _name=name):
                trial = dict(features)
                trial[_name] = Tensor(f)
                return total_loss_grad(targets, trial, weights).loss

            numeric = central_diff(scalar, f0.copy(), 1e-6)
            assert max_rel_err(out.feature_grads[name].array, numeric) < 1e-6


class TestLossWeights:
    def test_rejects_negative(self):
        with pytest.raises(ConfigError):
            LossWeights(-1.0, 1.0, {})
        with pytest.raises(ConfigError):
            LossWeights(1.0, 1.0, {"a": -0.1})

    def test_rejects_all_zero(self):
        with pytest.raises(ConfigError):
            LossWeights(0.0, 0.0, {})
