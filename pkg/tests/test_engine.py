import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from qtune import engine as E

from gradcheck import CASES, check_case


def _grad(fn, *arrays):
    ts = [E.Tensor(np.asarray(a, dtype=float), requires_grad=True) for a in arrays]
    with E.Tape() as tape:
        loss = fn(*ts)
    return tape.backward(loss, ts), loss


class TestForwardExamples:
    def test_scalar_mul(self):
        assert E.mul(E.Tensor([2.0]), E.Tensor([3.0])).data.tolist() == [6.0]

    def test_relu_negative(self):
        assert E.relu(E.Tensor(-1.5)).item() == 0.0

    def test_dense_identity(self):
        out = E.dense(E.Tensor([[1.0, 0.0]]), E.Tensor(np.eye(2)), E.Tensor(np.zeros(2)))
        np.testing.assert_array_equal(out.data, [[1.0, 0.0]])

    def test_shape_mismatch_names_op(self):
        with pytest.raises(E.ShapeError, match="add"):
            E.add(E.Tensor(np.ones(3)), E.Tensor(np.ones(4)))
        with pytest.raises(E.ShapeError, match="matmul"):
            E.matmul(E.Tensor(np.ones((2, 3))), E.Tensor(np.ones((2, 3))))
        with pytest.raises(E.ShapeError, match="conv2d"):
            E.conv2d(E.Tensor(np.ones((1, 2, 4, 4))), E.Tensor(np.ones((3, 3, 3, 3))))


class TestRoundSte:
    def test_half_away_from_zero(self):
        out = E.round_ste(E.Tensor([0.49, 0.5, -0.5, 1.5, -2.5, 2.4999])).data
        assert out.tolist() == [0.0, 1.0, -1.0, 2.0, -3.0, 2.0]

    def test_gradient_all_ones(self):
        x = np.random.default_rng(3).normal(size=10) * 5
        (g,), _ = _grad(lambda t: E.sum(E.round_ste(t)), x)
        np.testing.assert_array_equal(g, np.ones(10))

    def test_chain_rule(self):
        (g,), out = _grad(lambda t: E.mul(E.round_ste(t), 10.0), 2.7)
        assert out.item() == 30.0
        assert g.item() == 10.0

    @given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-1e6, 1e6)))
    def test_matches_reference_rounding(self, x):
        expected = np.sign(x) * np.floor(np.abs(x) + 0.5)
        np.testing.assert_array_equal(E.round_ste(E.Tensor(x)).data, expected)


class TestBackward:
    def test_sum_of_squares(self):
        (g,), _ = _grad(lambda x: E.sum(E.square(x)), [1.0, 2.0, 3.0])
        np.testing.assert_array_equal(g, [2.0, 4.0, 6.0])

    def test_unreachable_leaf_gets_zeros(self):
        x = E.Tensor([1.0, 2.0], requires_grad=True)
        y = E.Tensor([3.0], requires_grad=True)
        with E.Tape() as tape:
            loss = E.sum(E.square(y))
        gx, gy = tape.backward(loss, [x, y])
        np.testing.assert_array_equal(gx, [0.0, 0.0])
        np.testing.assert_array_equal(gy, [6.0])

    def test_fan_out_accumulates(self):
        (g,), _ = _grad(lambda x: E.sum(E.mul(x, x) + x), [2.0])
        assert g.item() == 5.0

    def test_replay_is_deterministic(self):
        x = E.Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
        with E.Tape() as tape:
            loss = E.sum(E.relu(E.matmul(x, E.Tensor(np.ones((4, 2))))))
        first = tape.backward(loss, [x])[0].copy()
        second = tape.backward(loss, [x])[0]
        np.testing.assert_array_equal(first, second)

    def test_nothing_recorded_without_tape(self):
        x = E.Tensor([1.0], requires_grad=True)
        y = E.square(x)
        assert not y.requires_grad

    def test_non_scalar_loss_rejected(self):
        x = E.Tensor([1.0, 2.0], requires_grad=True)
        with E.Tape() as tape:
            y = E.square(x)
        with pytest.raises(E.ShapeError):
            tape.backward(y, [x])

    def test_safe_reciprocal_zero(self):
        (g,), out = _grad(lambda x: E.sum(E.safe_reciprocal(x)), [0.0, 2.0])
        assert out.item() == 0.5
        np.testing.assert_array_equal(g, [0.0, -0.25])


@pytest.mark.parametrize("case", CASES, ids=lambda c: c.name)
def test_primitive_matches_finite_differences(case):
    assert check_case(case) < 1e-4


class TestConvGeometry:
    def test_transpose_doubles(self):
        out = E.conv_transpose2d(E.Tensor(np.ones((1, 4, 3, 5))), E.Tensor(np.ones((4, 2, 3, 3))))
        assert out.shape == (1, 2, 6, 10)

    def test_transpose_is_adjoint(self):
        rng = np.random.default_rng(1)
        w = rng.normal(size=(3, 2, 3, 3))
        x = rng.normal(size=(2, 2, 8, 8))
        y = rng.normal(size=(2, 3, 4, 4))
        lhs = np.sum(E.conv2d(E.Tensor(x), E.Tensor(w), stride=2, padding=1).data * y)
        rhs = np.sum(x * E.conv_transpose2d(E.Tensor(y), E.Tensor(w)).data)
        assert lhs == pytest.approx(rhs, rel=1e-12)

    def test_conv_matches_direct_loop(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(1, 2, 5, 5))
        w = rng.normal(size=(3, 2, 3, 3))
        out = E.conv2d(E.Tensor(x), E.Tensor(w), padding=1).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ref = np.zeros((1, 3, 5, 5))
        for o in range(3):
            for i in range(5):
                for j in range(5):
                    ref[0, o, i, j] = np.sum(xp[0, :, i : i + 3, j : j + 3] * w[o])
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_upsample_slice(self):
        out = E.upsample2x(E.Tensor(np.array([[0.0, 2.0]]))).data
        np.testing.assert_allclose(out[0], [0.0, 0.5, 1.5, 2.0])


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        p = E.Tensor(np.array([1.0, -2.0]))
        state = E.AdamState.fresh([p])
        E.adam_step([p], [np.zeros(2)], state, 0.1)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_first_step_moves_by_lr(self):
        # bias-corrected m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
        p = E.Tensor(np.array(1.0))
        E.adam_step([p], [np.array(1.0)], E.AdamState.fresh([p]), 0.1)
        assert p.item() == pytest.approx(1.0 - 0.1 / (1.0 + 1e-8), abs=1e-12)

    @pytest.mark.parametrize("g", [1e-6, 1.0, 1e6])
    def test_first_step_scale_free(self, g):
        p = E.Tensor(np.array(1.0))
        E.adam_step([p], [np.array(g)], E.AdamState.fresh([p]), 0.1)
        assert p.item() == pytest.approx(0.9, abs=1e-3)

    def test_constant_gradient_descends(self):
        p = E.Tensor(np.array(1.0))
        s = E.AdamState.fresh([p])
        vals = []
        for _ in range(2):
            E.adam_step([p], [np.array(1.0)], s, 0.1)
            vals.append(p.item())
        assert 1.0 > vals[0] > vals[1]

    def test_non_finite_gradient_skipped(self):
        a, b = E.Tensor(np.array(1.0)), E.Tensor(np.array(1.0))
        s = E.AdamState.fresh([a, b])
        E.adam_step([a, b], [np.array(np.nan), np.array(1.0)], s, 0.1)
        assert a.item() == 1.0 and b.item() < 1.0
        assert s.step == 1 and len(s.warnings) == 1

    def test_lr_must_be_positive(self):
        p = E.Tensor(np.array(1.0))
        with pytest.raises(ValueError):
            E.adam_step([p], [np.array(1.0)], E.AdamState.fresh([p]), 0.0)

    def test_clip_grad_norm(self):
        grads, total = E.clip_grad_norm([np.array([3.0]), np.array([4.0])], 1.0)
        assert total == 5.0
        assert math.sqrt(sum(float(g @ g) for g in grads)) == pytest.approx(1.0)


@settings(max_examples=50)
@given(
    st.tuples(st.integers(1, 4), st.integers(1, 4)),
    st.sampled_from(["row", "col", "scalar"]),
)
def test_broadcast_gradient_shapes(shape, kind):
    other = {"row": (1, shape[1]), "col": (shape[0], 1), "scalar": ()}[kind]
    a = E.Tensor(np.ones(shape), requires_grad=True)
    b = E.Tensor(np.full(other, 2.0), requires_grad=True)
    with E.Tape() as tape:
        loss = E.sum(E.mul(a, b))
    ga, gb = tape.backward(loss, [a, b])
    assert ga.shape == a.shape and gb.shape == b.shape
    assert gb.sum() == pytest.approx(a.data.size)
