import numpy as np
import pytest
from scipy import signal

from barelyseg.tensorcore import PRIMITIVES, ShapeError, Tape, UnsupportedPrimitiveError, conv_output_size, grad_check

from helpers import PRIMITIVE_BUILDERS


def conv3d_reference(x, w, b, stride, pad):
    """Direct correlation via scipy, subsampled for the stride."""
    cin = x.shape[0]
    xp = np.pad(x, [(0, 0)] + [(pad, pad)] * 3)
    out = []
    for o in range(w.shape[0]):
        acc = sum(signal.correlate(xp[c], w[o, c], mode="valid") for c in range(cin))
        out.append(acc[::stride, ::stride, ::stride] + b[o])
    return np.stack(out)


class TestConv3d:
    @pytest.mark.parametrize("stride", [1, 2])
    @pytest.mark.parametrize("k", [1, 3])
    def test_matches_direct_correlation(self, stride, k):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 6, 7, 8))
        w = rng.normal(size=(3, 2, k, k, k))
        b = rng.normal(size=3)
        t = Tape(record=False)
        y = t.conv3d(t.constant(x), t.constant(w), t.constant(b), stride=stride)
        np.testing.assert_allclose(t.value(y), conv3d_reference(x, w, b, stride, k // 2), atol=1e-12)

    @pytest.mark.parametrize("padding", [(0, 0, 0), (1, 0, 2), (3, 1, 1)])
    @pytest.mark.parametrize("stride", [1, 2])
    def test_input_gradient_any_padding(self, padding, stride):
        # (3, 1, 1) pads beyond k - 1 and takes the scatter path even at stride 1
        def builder(t, rng):
            x = t.parameter("x", rng.normal(size=(2, 5, 4, 6)))
            w = t.constant(rng.normal(size=(3, 2, 3, 3, 3)))
            y = t.conv3d(x, w, t.constant(np.zeros(3)), stride=stride, padding=padding)
            return t.sum(t.mul(y, t.constant(rng.normal(size=t.value(y).shape))))

        assert grad_check(builder, np.random.default_rng(8)) < 1e-6

    def test_same_padding_keeps_shape(self):
        t = Tape(record=False)
        x = t.constant(np.ones((1, 4, 4, 4)))
        y = t.conv3d(x, t.constant(np.ones((2, 1, 3, 3, 3))), t.constant(np.zeros(2)))
        assert t.value(y).shape == (2, 4, 4, 4)
        # corner voxel sees 2x2x2 ones of the zero-padded input
        assert t.value(y)[0, 0, 0, 0] == 8.0

    def test_output_size_formula(self):
        assert conv_output_size(8, 3, 2, 1) == 4
        assert conv_output_size(7, 3, 1, 1) == 7

    def test_channel_mismatch(self):
        t = Tape()
        with pytest.raises(ShapeError):
            t.conv3d(t.constant(np.ones((2, 4, 4, 4))), t.constant(np.ones((1, 3, 3, 3, 3))), t.constant(np.zeros(1)))


class TestTape:
    def test_unknown_primitive(self):
        t = Tape()
        with pytest.raises(UnsupportedPrimitiveError):
            t.evaluate("fft", (t.constant(1.0),))

    def test_arity(self):
        t = Tape()
        with pytest.raises(ShapeError):
            t.evaluate("add", (t.constant(1.0),))

    def test_nonscalar_backward(self):
        t = Tape()
        x = t.parameter("x", np.ones(3))
        with pytest.raises(ShapeError):
            t.backward(t.relu(x))

    def test_non_finite_forward(self):
        t = Tape()
        with pytest.raises(FloatingPointError), np.errstate(divide="ignore"):
            t.div(t.constant(np.ones(2)), t.constant(np.zeros(2)))

    def test_unreachable_parameter_gets_zero(self):
        t = Tape()
        a = t.parameter("a", np.full(3, 2.0))
        t.parameter("b", np.ones(4))
        grads = t.backward(t.sum(t.mul(a, a)))
        np.testing.assert_array_equal(grads["a"], np.full(3, 4.0))
        np.testing.assert_array_equal(grads["b"], np.zeros(4))

    def test_fan_out_accumulates(self):
        t = Tape()
        x = t.parameter("x", np.array([3.0]))
        y = t.add(t.mul(x, x), t.affine(x, 5.0))
        np.testing.assert_allclose(t.backward(t.sum(y))["x"], [11.0])

    def test_reregistering_returns_same_node(self):
        t = Tape()
        assert t.parameter("w", np.ones(2)) == t.parameter("w", np.zeros(2))

    def test_non_recording_tape_keeps_nothing(self):
        t = Tape(record=False)
        x = t.parameter("x", np.ones((1, 4, 4, 4)))
        y = t.conv3d(x, t.parameter("w", np.ones((1, 1, 3, 3, 3))), t.parameter("b", np.zeros(1)))
        assert t.nodes[y].saved is None
        with pytest.raises(RuntimeError):
            t.backward(t.sum(y))

    def test_softmax_sums_to_one(self):
        t = Tape(record=False)
        x = t.constant(np.random.default_rng(0).normal(size=(3, 2, 2, 2)) * 50)
        np.testing.assert_allclose(t.value(t.softmax(x)).sum(axis=0), 1.0, atol=1e-12)

    def test_take_gradient_is_one_plane(self):
        t = Tape()
        x = t.parameter("x", np.ones((2, 5, 3)))
        g = t.backward(t.sum(t.take(x, axis=1, index=2)))["x"]
        assert g[:, 2].sum() == 6 and g.sum() == 6


    def test_relu_slope(self):
        t = Tape()
        x = t.parameter("x", np.array([-2.0, 0.5, 3.0]))
        y = t.relu(x, slope=0.25)
        np.testing.assert_array_equal(t.value(y), [-0.5, 0.5, 3.0])
        np.testing.assert_array_equal(t.backward(t.sum(y))["x"], [0.25, 1.0, 1.0])
        np.testing.assert_array_equal(t.value(t.relu(x)), [0.0, 0.5, 3.0])


class TestGradients:
    def test_every_primitive_has_a_builder(self):
        assert {name.split("(")[0] for name in PRIMITIVE_BUILDERS} == set(PRIMITIVES)

    @pytest.mark.parametrize("name", sorted(PRIMITIVE_BUILDERS))
    def test_primitive_finite_differences(self, name):
        for seed in range(3):
            err = grad_check(PRIMITIVE_BUILDERS[name], np.random.default_rng(seed))
            assert err < 1e-4, (name, seed, err)

    def test_linear_loss_exact(self):
        # d/dx sum(3x + 1) = 3 everywhere
        t = Tape()
        x = t.parameter("x", np.arange(6.0))
        np.testing.assert_array_equal(t.backward(t.sum(t.affine(x, 3.0, 1.0)))["x"], np.full(6, 3.0))

    def test_kink_straddling_coordinates_are_skipped(self):
        def builder(t, rng):
            x = t.parameter("x", np.array([0.0, 0.5, -0.5]))
            return t.sum(t.relu(x))

        stats = {}
        err = grad_check(builder, np.random.default_rng(0), stats=stats)
        assert stats == {"checked": 2, "kinks": 1}
        assert err < 1e-10

    def test_wrong_gradient_is_caught(self, monkeypatch):
        fwd, bwd, arity = PRIMITIVES["sigmoid"]
        monkeypatch.setitem(PRIMITIVES, "sigmoid", (fwd, lambda g, n, v, needs: [2 * bwd(g, n, v, needs)[0]], arity))
        assert grad_check(PRIMITIVE_BUILDERS["sigmoid"], np.random.default_rng(0)) > 0.1
