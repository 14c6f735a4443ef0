import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from matformer import nn
from matformer.errors import DimensionError, NumericError
from matformer.nn import Tensor


def rand_param(rng, shape, name=None):
    return nn.parameter(rng.uniform(-1.0, 1.0, shape), name)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class TestMatmul:
    def test_identity(self):
        out = nn.matmul(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[3.0, 4.0], [5.0, 6.0]]))
        np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])

    def test_row_sum(self):
        out = nn.matmul(Tensor([[2.0, 3.0]]), Tensor([[1.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[5.0]])

    def test_matches_triple_loop(self, rng):
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        expected = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                for k in range(4):
                    expected[i, j] += a[i, k] * b[k, j]
        np.testing.assert_allclose(nn.matmul(Tensor(a), Tensor(b)).data, expected, rtol=1e-14, atol=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            nn.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    @pytest.mark.parametrize("a_shape,b_shape", [((3, 4), (4, 2)), ((2, 3, 4), (4, 5)), ((2, 2, 3, 4), (2, 2, 4, 3))])
    def test_gradients(self, rng, a_shape, b_shape):
        a = rand_param(rng, a_shape)
        b = rand_param(rng, b_shape)
        assert nn.grad_check(lambda: nn.mean(nn.matmul(a, b)), [a, b]) < 1e-6


class TestActivation:
    def test_squared_relu_values(self):
        out = nn.activation(Tensor([0.0, -3.0, 2.0]), "squared_relu").data
        np.testing.assert_array_equal(out, [0.0, 0.0, 4.0])

    def test_gelu_gradient_at_point(self):
        x = nn.parameter(np.array([0.7]))
        nn.activation(x, "gelu").backward(np.ones(1))

        def f(v):
            return nn.activation(Tensor([v]), "gelu").item()

        h = 1e-6
        numeric = (f(0.7 + h) - f(0.7 - h)) / (2 * h)
        assert abs(x.grad[0] - numeric) < 1e-6

    def test_gelu_tanh_form(self):
        u = np.linspace(-3, 3, 13)
        expected = 0.5 * u * (1 + np.tanh(math.sqrt(2 / math.pi) * (u + 0.044715 * u**3)))
        np.testing.assert_allclose(nn.activation(Tensor(u), "gelu").data, expected, rtol=1e-14)

    @pytest.mark.parametrize("kind", ["squared_relu", "gelu"])
    def test_gradients(self, rng, kind):
        x = rand_param(rng, (4, 5))
        assert nn.grad_check(lambda: nn.mean(nn.activation(x, kind)), [x]) < 1e-4

    def test_unknown(self):
        with pytest.raises(ValueError):
            nn.activation(Tensor([1.0]), "swish")


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss = nn.softmax_cross_entropy(Tensor(np.zeros((3, 4))), np.array([0, 1, 3]))
        assert loss.item() == pytest.approx(math.log(4), abs=1e-15)

    def test_margin_limit(self):
        losses = []
        for margin in (1.0, 10.0, 100.0):
            logits = np.zeros((1, 5))
            logits[0, 2] = margin
            losses.append(nn.softmax_cross_entropy(Tensor(logits), np.array([2])).item())
        assert losses[0] > losses[1] > losses[2]
        assert losses[2] < 1e-40

    def test_matches_direct_formula(self, rng):
        logits = rng.normal(size=(2, 5))
        targets = np.array([4, 1])
        direct = []
        for row, t in zip(logits, targets):
            p = np.exp(row) / np.exp(row).sum()
            direct.append(-math.log(p[t]))
        got = nn.softmax_cross_entropy(Tensor(logits), targets).item()
        assert got == pytest.approx(np.mean(direct), rel=1e-13)

    def test_target_out_of_range(self):
        with pytest.raises(IndexError):
            nn.softmax_cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))

    def test_stable_for_huge_logits(self):
        loss = nn.softmax_cross_entropy(Tensor(np.array([[1e300, 0.0]])), np.array([0]))
        assert loss.item() == 0.0

    def test_gradient(self, rng):
        logits = rand_param(rng, (2, 3, 7))
        targets = rng.integers(0, 7, size=(2, 3))
        assert nn.grad_check(lambda: nn.softmax_cross_entropy(logits, targets), [logits]) < 1e-4


class TestGradCheck:
    def test_linear_model(self, rng):
        w = rand_param(rng, (3, 2))
        x = Tensor(rng.uniform(-1, 1, (4, 3)))
        assert nn.grad_check(lambda: nn.mean(nn.matmul(x, w)), [w], eps=1e-5) < 1e-7

    def test_empty(self):
        assert nn.grad_check(lambda: Tensor(np.asarray(1.0)), []) == 0.0

    def test_inert_rows(self, rng):
        w = rand_param(rng, (4, 3))
        x = Tensor(rng.uniform(-1, 1, (5, 3)))
        # only the first two rows of w reach the loss
        f = lambda: nn.mean(nn.matmul(x, nn.transpose(nn.row_slice(w, 2))))
        assert nn.grad_check(f, [w], eps=1e-5, rows=[2]) < 1e-7
        # declaring a live row inert is caught through its nonzero gradient
        assert nn.grad_check(f, [w], eps=1e-5, rows=[1]) == 1.0
        with pytest.raises(ValueError):
            nn.grad_check(f, [w], rows=[1, 2])

    def test_non_finite_loss(self):
        w = nn.parameter(np.array([1.0]))
        with pytest.raises(NumericError):
            nn.grad_check(lambda: nn.scale(w, float("inf")), [w])

    def test_detects_wrong_gradient(self, rng):
        w = rand_param(rng, (3,))

        def broken():
            out = nn.mean(nn.mul(w, w))
            out._backward = lambda g: w._accum(np.ones(3) * g)  # deliberately wrong
            return out

        assert nn.grad_check(broken, [w]) > 0.1


class TestOps:
    def test_add_broadcast_gradient(self, rng):
        a = rand_param(rng, (2, 3, 4))
        b = rand_param(rng, (4,))
        assert nn.grad_check(lambda: nn.mean(nn.mul(nn.add(a, b), nn.add(a, b))), [a, b]) < 1e-4

    def test_fan_out_accumulates(self):
        x = nn.parameter(np.array([3.0]))
        y = nn.add(nn.mul(x, x), x)
        y.backward(np.ones(1))
        assert x.grad[0] == pytest.approx(7.0)

    def test_scale_transpose_reshape(self, rng):
        x = rand_param(rng, (2, 3, 4))
        w = Tensor(rng.normal(size=(4, 6)))

        def f():
            y = nn.reshape(nn.transpose(nn.scale(x, 0.5), (2, 0, 1)), (4, 6))
            return nn.mean(nn.mul(y, w))

        assert nn.grad_check(f, [x]) < 1e-4

    def test_concat_and_narrow(self, rng):
        a = rand_param(rng, (2, 3))
        b = rand_param(rng, (2, 2))
        w = Tensor(rng.normal(size=(2, 4)))

        def f():
            c = nn.concat([a, b], axis=1)
            return nn.mean(nn.mul(nn.narrow(c, 1, 1, 5), w))

        assert nn.grad_check(f, [a, b]) < 1e-4
        with pytest.raises(DimensionError):
            nn.narrow(a, 1, 2, 4)

    def test_layer_norm(self, rng):
        x = rand_param(rng, (2, 3, 6))
        gain = rand_param(rng, (6,))
        bias = rand_param(rng, (6,))
        w = Tensor(rng.normal(size=(2, 3, 6)))
        assert nn.grad_check(lambda: nn.mean(nn.mul(nn.layer_norm(x, gain, bias), w)), [x, gain, bias]) < 1e-4

    def test_layer_norm_statistics(self, rng):
        x = Tensor(rng.normal(3.0, 5.0, size=(4, 16)))
        out = nn.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16))).data
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=-1), 1.0, rtol=1e-5)

    def test_embedding_lookup(self, rng):
        table = rand_param(rng, (5, 3))
        ids = np.array([[0, 4, 4], [2, 0, 1]])
        out = nn.embedding_lookup(table, ids)
        np.testing.assert_array_equal(out.data, table.data[ids])
        w = Tensor(rng.normal(size=(2, 3, 3)))
        assert nn.grad_check(lambda: nn.mean(nn.mul(nn.embedding_lookup(table, ids), w)), [table]) < 1e-4
        with pytest.raises(IndexError):
            nn.embedding_lookup(table, np.array([5]))

    def test_softmax_masked(self, rng):
        x = rand_param(rng, (3, 4))
        mask = np.tril(np.ones((3, 4), dtype=bool))
        p = nn.softmax(x, mask).data
        assert (p[~mask] == 0.0).all()
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
        w = Tensor(rng.normal(size=(3, 4)))
        assert nn.grad_check(lambda: nn.mean(nn.mul(nn.softmax(x, mask), w)), [x]) < 1e-4

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 9), st.floats(0.1, 50.0), st.integers(0, 2**31))
    def test_softmax_sums_to_one(self, rows, cols, spread, seed):
        x = np.random.default_rng(seed).uniform(-spread, spread, (rows, cols))
        p = nn.softmax(Tensor(x)).data
        assert np.all(np.abs(p.sum(axis=-1) - 1.0) <= 1e-12)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_rejected(self):
        with pytest.raises(NumericError):
            Tensor(np.array([1.0, np.nan]))
        with pytest.raises(NumericError):
            nn.scale(Tensor(np.array([1e308])), 10.0)

    def test_too_many_axes(self):
        with pytest.raises(DimensionError):
            Tensor(np.zeros((1, 1, 1, 1, 1)))

    def test_deterministic(self, rng):
        a = rng.normal(size=(8, 16))
        b = rng.normal(size=(16, 8))
        first = nn.softmax(nn.matmul(Tensor(a), Tensor(b))).data
        second = nn.softmax(nn.matmul(Tensor(a), Tensor(b))).data
        assert first.tobytes() == second.tobytes()

    def test_no_grad_records_nothing(self, rng):
        x = rand_param(rng, (2, 2))
        with nn.no_grad():
            y = nn.matmul(x, x)
        assert not y.requires_grad and y._backward is None


class TestRowSlice:
    def test_is_a_view(self, rng):
        w = rand_param(rng, (6, 3))
        s = nn.row_slice(w, 2)
        assert np.shares_memory(s.data, w.data)
        np.testing.assert_array_equal(s.data, w.data[:2])

    def test_gradient_lands_in_prefix_only(self, rng):
        w = rand_param(rng, (6, 3))
        x = Tensor(rng.normal(size=(4, 3)))
        nn.mean(nn.matmul(x, nn.transpose(nn.row_slice(w, 2)))).backward()
        assert w.grad_rows == 2
        assert (w.grad[2:] == 0).all()
        assert np.abs(w.grad[:2]).sum() > 0

    def test_accumulates_across_slices(self, rng):
        w = rand_param(rng, (6, 3))
        x = Tensor(rng.normal(size=(4, 3)))

        def f():
            a = nn.matmul(x, nn.transpose(nn.row_slice(w, 2)))
            b = nn.matmul(x, nn.transpose(nn.row_slice(w, 5)))
            return nn.add(nn.mean(a), nn.mean(b))

        assert nn.grad_check(f, [w]) < 1e-6

    def test_bounds(self, rng):
        w = rand_param(rng, (3, 2))
        with pytest.raises(DimensionError):
            nn.row_slice(w, 0)
        with pytest.raises(DimensionError):
            nn.row_slice(w, 4)


class TestAdam:
    def test_single_step_matches_formula(self):
        p = np.array([1.0, -2.0])
        g = np.array([0.5, 0.25])
        m = np.zeros(2)
        v = np.zeros(2)
        nn.adam_step(p, g, m, v, t=1, lr=0.1, betas=(0.9, 0.98), eps=1e-9)
        # first step with bias correction is lr * sign(g) up to eps
        np.testing.assert_allclose(p, [0.9, -2.1], rtol=1e-7)

    def test_matches_reference_loop(self, rng):
        p0 = rng.normal(size=5)
        grads = rng.normal(size=(4, 5))
        p = p0.copy()
        m = np.zeros(5)
        v = np.zeros(5)
        for t, g in enumerate(grads, start=1):
            nn.adam_step(p, g, m, v, t=t, lr=0.01, betas=(0.9, 0.98), eps=1e-9)
        ref = p0.copy()
        mr = np.zeros(5)
        vr = np.zeros(5)
        for t, g in enumerate(grads, start=1):
            mr = 0.9 * mr + 0.1 * g
            vr = 0.98 * vr + 0.02 * g * g
            ref -= 0.01 * (mr / (1 - 0.9**t)) / (np.sqrt(vr / (1 - 0.98**t)) + 1e-9)
        np.testing.assert_allclose(p, ref, rtol=1e-6)

    def test_untouched_rows_stay_bitwise(self, rng):
        w = rand_param(rng, (8, 3))
        before = w.data.copy()
        opt = nn.Adam([w])
        x = Tensor(rng.normal(size=(4, 3)))
        for _ in range(5):
            opt.zero_grad()
            nn.mean(nn.matmul(x, nn.transpose(nn.row_slice(w, 3)))).backward()
            opt.step(1e-2)
        assert w.data[3:].tobytes() == before[3:].tobytes()
        assert not np.array_equal(w.data[:3], before[:3])

    def test_clipping(self):
        w = nn.parameter(np.zeros(4))
        opt = nn.Adam([w], clip_norm=1.0)
        w.grad = np.full(4, 10.0)
        w.grad_rows = 4
        norm = opt.step(1e-3)
        assert norm == pytest.approx(20.0)

    def test_schedule(self):
        assert nn.warmup_inverse_sqrt(50, 1.0, 100) == pytest.approx(0.5)
        assert nn.warmup_inverse_sqrt(100, 1.0, 100) == pytest.approx(1.0)
        assert nn.warmup_inverse_sqrt(400, 1.0, 100) == pytest.approx(0.5)
