import numpy as np
import pytest

from pani import autodiff as ad
from pani.autodiff import Tape, backward_gradients, one_hot, soft_cross_entropy
from pani.errors import ConfigError, ContractError
from pani.model import (SGD, Injection, ModelConfig, forward_with_taps, init_params, param_shapes, predict_logits,
                        sgd_step)
from pani.neighbors import filter_peers_random, knn_patches
from pani.patches import extract_patches

SMALL = ModelConfig(input_shape=(1, 8, 8), num_classes=3, widths=(4, 6, 8), penultimate=5)


def manual_forward(params, x):
    """Layer-by-layer composition using only the array-level convolution."""
    relu = lambda a: np.maximum(a, 0.0)  # noqa: E731
    h = relu(ad.conv2d_forward(x, params["conv1.w"], params["conv1.b"], 1, 1))
    h = relu(ad.conv2d_forward(h, params["conv2.w"], params["conv2.b"], 2, 1))
    h = relu(ad.conv2d_forward(h, params["conv3.w"], params["conv3.b"], 2, 1))
    h = h.mean(axis=(2, 3))
    pen = relu(h @ params["fc1.w"].T + params["fc1.b"])
    return pen @ params["fc2.w"].T + params["fc2.b"], pen


class TestInit:
    def test_deterministic(self):
        a = init_params(SMALL, np.random.default_rng(3))
        b = init_params(SMALL, np.random.default_rng(3))
        assert all(a[k].tobytes() == b[k].tobytes() for k in a)

    def test_biases_zero_and_shapes(self):
        params = init_params(SMALL, np.random.default_rng(0))
        for name, shape in param_shapes(SMALL).items():
            assert params[name].shape == shape
            if name.endswith(".b"):
                assert not params[name].any()

    def test_he_std(self):
        cfg = ModelConfig()
        for seed in range(10):
            w = init_params(cfg, np.random.default_rng(seed))["conv2.w"]  # 3x3x16 fan-in
            target = np.sqrt(2.0 / (16 * 9))
            assert abs(w.std() / target - 1) < 0.1


class TestForward:
    def test_shapes(self):
        cfg = ModelConfig()
        params = init_params(cfg, np.random.default_rng(0))
        out = forward_with_taps(params, np.zeros((3, 1, 16, 16)))
        assert out.logits.shape == (3, 10)
        assert out.penultimate.shape == (3, 64)
        assert out.tapped[1].shape == (3, 16, 16, 16)

    def test_matches_manual_composition(self):
        rng = np.random.default_rng(1)
        params = init_params(SMALL, rng)
        x = rng.uniform(size=(4, 1, 8, 8))
        out = forward_with_taps(params, x)
        logits, pen = manual_forward(params, x)
        np.testing.assert_allclose(out.logits.value, logits, rtol=0, atol=1e-12)
        np.testing.assert_allclose(out.penultimate.value, pen, rtol=0, atol=1e-12)

    @pytest.mark.parametrize("tap", [0, 1])
    def test_zero_injection_bit_exact(self, tap):
        rng = np.random.default_rng(2)
        params = init_params(SMALL, rng)
        x = rng.uniform(size=(4, 1, 8, 8))
        clean = forward_with_taps(params, x)
        idx = knn_patches(extract_patches(clean.tapped[tap].value, 2), filter_peers_random(4, 2, rng), 3)
        inj = forward_with_taps(params, x, [Injection(tap, idx, np.zeros(idx.shape), 2)])
        assert clean.logits.value.tobytes() == inj.logits.value.tobytes()

    def test_invalid_tap(self):
        params = init_params(SMALL, np.random.default_rng(0))
        with pytest.raises(ConfigError):
            forward_with_taps(params, np.zeros((2, 1, 8, 8)), [Injection(2, None, None, 2)])

    def test_predict_batches(self):
        rng = np.random.default_rng(3)
        params = init_params(SMALL, rng)
        x = rng.uniform(size=(7, 1, 8, 8))
        np.testing.assert_allclose(predict_logits(params, x, batch_size=3), manual_forward(params, x)[0],
                                   rtol=0, atol=1e-12)

    def test_sgd_step_decreases_loss(self):
        successes = 0
        for seed in range(100):
            rng = np.random.default_rng(seed)
            params = init_params(SMALL, rng)
            x = rng.uniform(size=(6, 1, 8, 8))
            t = one_hot(rng.integers(0, 3, 6), 3)

            def loss(p):
                tape = Tape()
                return soft_cross_entropy(forward_with_taps(p, x, tape=tape).logits, t)

            before = loss(params)
            grads = backward_gradients(before.tape, before, wrt=list(params))
            after = loss(sgd_step(params, grads, 1e-2))
            successes += float(after.value) < float(before.value)
        assert successes >= 95


class TestSgd:
    def test_plain(self):
        out = sgd_step({"w": np.array(1.0)}, {"w": np.array(2.0)}, 0.1)
        assert float(out["w"]) == pytest.approx(0.8)

    def test_zero_lr(self):
        params = {"w": np.array([1.0, -2.0])}
        out = sgd_step(params, {"w": np.array([3.0, 4.0])}, 0.0, 0.9, 1e-2)
        np.testing.assert_array_equal(out["w"], params["w"])

    def test_momentum_recurrence(self):
        opt = SGD(momentum=0.9, weight_decay=0.0)
        w = {"w": np.array(1.0)}
        w = opt.step(w, {"w": np.array(1.0)}, 0.1)   # v=1, w=0.9
        w = opt.step(w, {"w": np.array(2.0)}, 0.1)   # v=0.9+2=2.9, w=0.61
        assert float(w["w"]) == pytest.approx(0.61)
        assert float(opt.velocity["w"]) == pytest.approx(2.9)

    def test_weight_decay(self):
        out = sgd_step({"w": np.array(2.0)}, {"w": np.array(0.0)}, 0.5, weight_decay=0.1)
        assert float(out["w"]) == pytest.approx(1.9)

    def test_missing_key(self):
        with pytest.raises(ContractError):
            sgd_step({"a": np.zeros(1)}, {"b": np.zeros(1)}, 0.1)


def test_tap_shapes():
    cfg = ModelConfig(input_shape=(3, 12, 12))
    assert cfg.tap_shape(0) == (3, 12, 12)
    assert cfg.tap_shape(1) == (16, 12, 12)
    with pytest.raises(ConfigError):
        cfg.tap_shape(5)
