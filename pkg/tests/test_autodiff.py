import numpy as np
import pytest

from helpers import conv_loops, gradient_errors, random_graph, relative_error, softmax_rows
from pani import autodiff as ad
from pani.autodiff import Tape, backward_gradients, conv2d_forward, kl_divergence, soft_cross_entropy
from pani.errors import ContractError, DimensionError, NonFiniteError


class TestConvForward:
    def test_scalar_kernel(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
        out = conv2d_forward(x, np.full((1, 1, 1, 1), 2.0), np.zeros(1))
        np.testing.assert_array_equal(out[0, 0], [[2, 4], [6, 8]])

    def test_window_sums(self):
        x = np.arange(1.0, 10.0).reshape(1, 1, 3, 3)
        out = conv2d_forward(x, np.ones((1, 1, 2, 2)), np.zeros(1))
        np.testing.assert_array_equal(out[0, 0], [[12, 16], [24, 28]])

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 0), (2, 1), (3, 2)])
    def test_matches_nested_loops(self, stride, pad):
        rng = np.random.default_rng(stride * 10 + pad)
        x = rng.normal(size=(2, 3, 8, 8))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        np.testing.assert_allclose(conv2d_forward(x, w, b, stride, pad), conv_loops(x, w, b, stride, pad),
                                   rtol=0, atol=1e-12)

    def test_output_size_formula(self):
        out = conv2d_forward(np.zeros((1, 1, 7, 5)), np.zeros((2, 1, 3, 2)), np.zeros(2), stride=2, pad=1)
        assert out.shape == (1, 2, (7 + 2 - 3) // 2 + 1, (5 + 2 - 2) // 2 + 1)

    def test_linearity(self):
        rng = np.random.default_rng(3)
        x, y = rng.normal(size=(2, 2, 2, 6, 6))
        w = rng.normal(size=(3, 2, 3, 3))
        zero = np.zeros(3)
        lhs = conv2d_forward(1.5 * x - 0.7 * y, w, zero, 1, 1)
        rhs = 1.5 * conv2d_forward(x, w, zero, 1, 1) - 0.7 * conv2d_forward(y, w, zero, 1, 1)
        np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-10)

    def test_channel_mismatch_names_axis(self):
        with pytest.raises(DimensionError, match="axis 1"):
            conv2d_forward(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)), np.zeros(1))

    def test_kernel_larger_than_padded_input(self):
        with pytest.raises(DimensionError, match="axes 2,3"):
            conv2d_forward(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 3, 3)), np.zeros(1))

    def test_deterministic(self):
        rng = np.random.default_rng(0)
        x, w, b = rng.normal(size=(2, 2, 5, 5)), rng.normal(size=(2, 2, 3, 3)), rng.normal(size=2)
        assert conv2d_forward(x, w, b, 1, 1).tobytes() == conv2d_forward(x, w, b, 1, 1).tobytes()


class TestBackward:
    def test_square(self):
        tape = Tape()
        x = tape.leaf(3.0, "x")
        assert backward_gradients(tape, x * x)["x"] == pytest.approx(6.0)

    def test_product_rule(self):
        tape = Tape()
        x, y = tape.leaf(2.0, "x"), tape.leaf(3.0, "y")
        g = backward_gradients(tape, x * y + y)
        assert g["x"] == pytest.approx(3.0)
        assert g["y"] == pytest.approx(3.0)

    def test_non_scalar_output(self):
        tape = Tape()
        x = tape.leaf(np.ones(3), "x")
        with pytest.raises(ContractError):
            backward_gradients(tape, ad.relu(x))

    def test_unused_leaf_gets_zero(self):
        tape = Tape()
        x, y = tape.leaf(np.ones(2), "x"), tape.leaf(np.ones(3), "y")
        g = backward_gradients(tape, ad.sum_all(x))
        np.testing.assert_array_equal(g["y"], np.zeros(3))

    def test_duplicate_leaf_name(self):
        tape = Tape()
        tape.leaf(1.0, "a")
        with pytest.raises(ContractError):
            tape.leaf(2.0, "a")

    def test_wrt_filter(self):
        tape = Tape()
        x, y = tape.leaf(2.0, "x"), tape.leaf(5.0, "y")
        assert set(backward_gradients(tape, x * y, wrt=["y"])) == {"y"}

    def test_broadcast_add_gradient(self):
        tape = Tape()
        a = tape.leaf(np.ones((2, 3)), "a")
        b = tape.leaf(np.ones(3), "b")
        g = backward_gradients(tape, ad.sum_all(ad.add(a, b)))
        np.testing.assert_array_equal(g["b"], np.full(3, 2.0))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_aborts(self):
        tape = Tape()
        x = tape.leaf(np.array([1e308]), "x")
        with pytest.raises(NonFiniteError):
            ad.scale(x, 10.0)

    def test_two_layer_network_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        leaves = {"x": rng.normal(size=(3, 4)), "w1": rng.normal(size=(5, 4)), "b1": rng.normal(size=5),
                  "w2": rng.normal(size=(3, 5)), "b2": rng.normal(size=3)}
        targets = softmax_rows(rng.normal(size=(3, 3)))

        def build(v):
            tape = Tape()
            t = {k: tape.leaf(a, k) for k, a in v.items()}
            hidden = ad.relu(ad.dense(t["x"], t["w1"], t["b1"]))
            return soft_cross_entropy(ad.dense(hidden, t["w2"], t["b2"]), targets), tape

        assert max(gradient_errors(leaves, build).values()) < 1e-4

    @pytest.mark.parametrize("seed", range(5))
    def test_random_graphs(self, seed):
        leaves, build = random_graph(np.random.default_rng(seed))
        assert max(gradient_errors(leaves, build).values()) < 1e-4


class TestKL:
    def test_identical_is_zero(self):
        logits = np.random.default_rng(0).normal(size=(4, 5))
        tape = Tape()
        assert float(kl_divergence(logits, tape.leaf(logits, "p")).value) == pytest.approx(0.0, abs=1e-12)

    def test_direct_value(self):
        tape = Tape()
        pert = tape.leaf(np.log([[0.25, 0.75]]), "p")
        kl = kl_divergence(np.zeros((1, 2)), pert)
        assert float(kl.value) == pytest.approx(0.5 * np.log(2) + 0.5 * np.log(2 / 3), abs=1e-12)
        assert float(kl.value) == pytest.approx(0.14384, abs=1e-5)

    def test_non_negative(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            tape = Tape()
            assert float(kl_divergence(rng.normal(size=(3, 4)) * 3, tape.leaf(rng.normal(size=(3, 4)) * 3,
                                                                             "p")).value) >= 0

    def test_gradient(self):
        rng = np.random.default_rng(2)
        ref = rng.normal(size=(3, 4))
        leaves = {"p": rng.normal(size=(3, 4))}

        def build(v):
            tape = Tape()
            return kl_divergence(ref, tape.leaf(v["p"], "p")), tape

        assert gradient_errors(leaves, build)["p"] < 1e-4

    def test_reference_is_blocked(self):
        tape = Tape()
        ref = tape.leaf(np.array([[0.3, -0.2]]), "ref")
        pert = tape.leaf(np.array([[1.0, 0.0]]), "pert")
        g = backward_gradients(tape, kl_divergence(ref, pert))
        np.testing.assert_array_equal(g["ref"], 0.0)

    def test_shape_mismatch(self):
        tape = Tape()
        with pytest.raises(DimensionError):
            kl_divergence(np.zeros((2, 3)), tape.leaf(np.zeros((2, 4)), "p"))


class TestSoftCrossEntropy:
    def test_uniform_logits(self):
        tape = Tape()
        ce = soft_cross_entropy(tape.leaf(np.zeros((1, 4)), "z"), np.array([[1.0, 0, 0, 0]]))
        assert float(ce.value) == pytest.approx(np.log(4), abs=1e-12)

    def test_entropy_identity(self):
        logits = np.array([[0.2, -1.0, 0.5]])
        p = softmax_rows(logits)
        tape = Tape()
        ce = soft_cross_entropy(tape.leaf(logits, "z"), p)
        assert float(ce.value) == pytest.approx(-(p * np.log(p)).sum(), abs=1e-12)

    def test_linear_in_target(self):
        logits = np.array([[0.3, 1.2, -0.4]])
        yi, yj = np.eye(3)[[0]], np.eye(3)[[2]]
        lam = 0.3

        def ce(t):
            return float(soft_cross_entropy(Tape().leaf(logits, "z"), t).value)

        assert ce(lam * yi + (1 - lam) * yj) == pytest.approx(lam * ce(yi) + (1 - lam) * ce(yj), abs=1e-12)

    def test_rejects_non_distribution(self):
        with pytest.raises(ContractError):
            soft_cross_entropy(Tape().leaf(np.zeros((1, 2)), "z"), np.array([[0.7, 0.7]]))
        with pytest.raises(ContractError):
            soft_cross_entropy(Tape().leaf(np.zeros((1, 2)), "z"), np.array([[1.5, -0.5]]))


def test_relative_error_measure():
    assert relative_error(np.ones(3), np.ones(3)) == 0.0
    assert relative_error(np.array([1.0, 0.0]), np.array([0.0, 0.0])) == 1.0
