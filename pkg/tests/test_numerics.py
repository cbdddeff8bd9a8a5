import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nlqformer import numerics as nx
from nlqformer.gradsuite import INSTANCE_SEEDS, MODEL_TOLERANCE, OP_TOLERANCE, model_gradcheck, op_cases
from nlqformer.numerics import Tensor, grad_check


def naive_matmul(a, b):
    M, K = a.shape
    N = b.shape[1]
    out = np.zeros((M, N))
    for i in range(M):
        for j in range(N):
            for k in range(K):
                out[i, j] += a[i, k] * b[k, j]
    return out


def naive_conv(x, w, stride, depthwise):
    """Sliding-window oracle with zero padding of (K-1)/2."""
    T, C_in = x.shape
    K = w.shape[0]
    pad = (K - 1) // 2
    T_out = math.ceil(T / stride)
    C_out = C_in if depthwise else w.shape[2]
    out = np.zeros((T_out, C_out))
    for j in range(T_out):
        for k in range(K):
            src = stride * j + k - pad
            if not 0 <= src < T:
                continue
            if depthwise:
                out[j] += w[k] * x[src]
            else:
                out[j] += x[src] @ w[k]
    return out


def dense_attention(q, k, v, window, mask):
    """Per-position loop over every key, keeping those inside the window."""
    T, H, d = q.shape
    r = (window - 1) // 2
    out = np.zeros_like(q)
    for t in range(T):
        if not mask[t]:
            continue
        for h in range(H):
            keys = [s for s in range(T) if abs(s - t) <= r and mask[s]]
            logits = np.array([q[t, h] @ k[s, h] / math.sqrt(d) for s in keys])
            w = np.exp(logits - logits.max())
            w /= w.sum()
            out[t, h] = sum(wi * v[s, h] for wi, s in zip(w, keys))
    return out


class TestMatmul:
    def test_identity(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(nx.matmul(a, Tensor(np.eye(2, dtype=np.float32))).data, a.data)

    def test_scalar_case(self):
        assert nx.matmul(Tensor([[2.0]]), Tensor([[3.0]])).data[0, 0] == 6.0

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(1)
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
        got = nx.matmul(Tensor(a), Tensor(b)).data
        np.testing.assert_allclose(got, naive_matmul(a, b), atol=1e-6)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
            nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(nx.softmax_lastdim(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=1e-6)

    def test_no_overflow(self):
        p = nx.softmax_lastdim(Tensor([1000.0, 0.0])).data
        assert np.all(np.isfinite(p))
        assert p[0] == pytest.approx(1.0)
        assert p[1] == pytest.approx(0.0, abs=1e-30)

    def test_hand_values(self):
        e = np.exp([1.0, 2.0, 3.0])
        expected = e / e.sum()
        np.testing.assert_allclose(expected, [0.0900, 0.2447, 0.6652], atol=5e-5)
        np.testing.assert_allclose(nx.softmax_lastdim(Tensor([1.0, 2.0, 3.0])).data, expected, rtol=1e-6)

    def test_masked_entries_exactly_zero(self):
        p = nx.softmax_lastdim(Tensor([[3.0, 1.0, 2.0]]), np.array([[True, False, True]])).data
        assert p[0, 1] == 0.0
        assert p.sum() == pytest.approx(1.0, abs=1e-6)

    def test_fully_masked_row_rejected(self):
        with pytest.raises(ValueError):
            nx.softmax_lastdim(Tensor([[1.0, 2.0]]), np.array([[False, False]]))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 9), st.integers(0, 10_000))
    def test_rows_sum_to_one(self, rows, cols, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((rows, cols)) * 10
        mask = rng.random((rows, cols)) > 0.4
        mask[:, 0] = True
        p = nx.softmax_lastdim(Tensor(x), mask).data
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)
        assert np.all(p[~mask] == 0.0)


class TestLayerNorm:
    def test_constant_row(self):
        out = nx.layer_norm(Tensor([[5.0, 5.0, 5.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3))).data
        np.testing.assert_array_equal(out, 0.0)

    def test_two_values(self):
        out = nx.layer_norm(Tensor(np.array([1.0, 3.0])), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
        np.testing.assert_allclose(out.data, [-1.0, 1.0], atol=1e-6)

    def test_zero_gain_gives_bias(self):
        rng = np.random.default_rng(0)
        bias = rng.standard_normal(4)
        out = nx.layer_norm(Tensor(rng.standard_normal((3, 4))), Tensor(np.zeros(4)), Tensor(bias))
        np.testing.assert_allclose(out.data, np.broadcast_to(bias, (3, 4)), rtol=1e-6)


class TestConv1d:
    def test_identity_kernel(self):
        x = np.random.default_rng(0).standard_normal((7, 3)).astype(np.float32)
        w = np.zeros((1, 3, 3), dtype=np.float32)
        w[0] = np.eye(3)
        np.testing.assert_array_equal(nx.conv1d(Tensor(x), Tensor(w)).data, x)

    def test_hand_strided_depthwise(self):
        out = nx.conv1d(Tensor([[1.0], [2.0], [3.0], [4.0]]), Tensor([[1.0], [1.0], [1.0]]),
                        stride=2, depthwise=True)
        np.testing.assert_array_equal(out.data[:, 0], [3.0, 9.0])

    @pytest.mark.parametrize("stride", [1, 2])
    @pytest.mark.parametrize("depthwise", [False, True])
    @pytest.mark.parametrize("seed", range(3))
    def test_matches_sliding_window(self, stride, depthwise, seed):
        rng = np.random.default_rng(seed)
        T = int(rng.integers(3, 33))
        x = rng.standard_normal((T, 4))
        w = rng.standard_normal((3, 4) if depthwise else (3, 4, 5))
        got = nx.conv1d(Tensor(x), Tensor(w), stride=stride, depthwise=depthwise).data
        np.testing.assert_allclose(got, naive_conv(x, w, stride, depthwise), atol=1e-6)

    def test_masked_inputs_contribute_zero(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((8, 2))
        w = rng.standard_normal((3, 2, 2))
        mask = np.arange(8) < 5
        zeroed = x * mask[:, None]
        np.testing.assert_allclose(nx.conv1d(Tensor(x), Tensor(w), mask=mask).data,
                                   naive_conv(zeroed, w, 1, False), atol=1e-12)

    def test_output_length_is_ceil(self):
        x = Tensor(np.ones((5, 2)))
        assert nx.conv1d(x, Tensor(np.ones((3, 2))), stride=2, depthwise=True).shape == (3, 2)

    def test_bad_stride_rejected(self):
        with pytest.raises(ValueError):
            nx.conv1d(Tensor(np.ones((4, 1))), Tensor(np.ones((3, 1))), stride=3, depthwise=True)


class TestWindowedAttention:
    def test_wide_window_equals_full_attention(self):
        rng = np.random.default_rng(0)
        T, H, d = 6, 2, 4
        q, k, v = (rng.standard_normal((T, H, d)) for _ in range(3))
        mask = np.ones(T, bool)
        got = nx.windowed_attention(Tensor(q), Tensor(k), Tensor(v), 2 * T - 1).data
        np.testing.assert_allclose(got, dense_attention(q, k, v, 10 * T + 1, mask), atol=1e-10)

    def test_window_one_returns_values(self):
        rng = np.random.default_rng(1)
        q, k, v = (rng.standard_normal((5, 2, 3)) for _ in range(3))
        np.testing.assert_allclose(nx.windowed_attention(Tensor(q), Tensor(k), Tensor(v), 1).data, v, atol=1e-12)

    def test_first_position_sees_only_neighbour(self):
        # make v[2:] huge: if position 0 attended beyond {0,1} the output would show it
        q = np.zeros((4, 1, 1))
        k = np.zeros((4, 1, 1))
        v = np.array([1.0, 3.0, 1000.0, 1000.0]).reshape(4, 1, 1)
        out = nx.windowed_attention(Tensor(q), Tensor(k), Tensor(v), 3).data
        assert out[0, 0, 0] == pytest.approx(2.0)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_dense_oracle(self, seed):
        rng = np.random.default_rng(seed)
        T = int(rng.integers(2, 33))
        window = int(rng.choice([1, 3, 5, 9, 19]))
        q, k, v = (rng.standard_normal((T, 2, 3)) for _ in range(3))
        mask = np.arange(T) < rng.integers(1, T + 1)
        got = nx.windowed_attention(Tensor(q), Tensor(k), Tensor(v), window, mask).data
        np.testing.assert_allclose(got, dense_attention(q, k, v, window, mask), atol=1e-6)

    @pytest.mark.parametrize("window", [0, 2, -1])
    def test_bad_window_rejected(self, window):
        x = Tensor(np.ones((3, 1, 1)))
        with pytest.raises(ValueError):
            nx.windowed_attention(x, x, x, window)


class TestGradCheck:
    def test_square(self):
        report = grad_check(lambda x: x * x, [np.array([3.0])])
        assert report.max_rel_error < 1e-9

        x = Tensor(np.array([3.0]), requires_grad=True)
        (x * x).sum().backward()
        assert x.grad[0] == pytest.approx(6.0)

    @pytest.mark.filterwarnings("ignore:invalid value:RuntimeWarning")
    def test_non_finite_reported(self):
        report = grad_check(lambda x: nx.log(x), [np.array([-1.0])])
        assert not report.finite
        assert not report.passed(1.0)

    def test_report_is_max_over_inputs(self):
        rng = np.random.default_rng(0)
        report = grad_check(nx.matmul, [rng.standard_normal((3, 4)), rng.standard_normal((4, 2))])
        assert report.max_rel_error == max(report.per_input)


@pytest.mark.parametrize("name", sorted(op_cases(0)))
@pytest.mark.parametrize("seed", INSTANCE_SEEDS)
def test_every_op_passes_gradcheck(name, seed):
    op, inputs = op_cases(seed)[name]
    report = grad_check(op, inputs, probes=30, seed=seed, name=name)
    assert report.passed(OP_TOLERANCE), report


def test_model_gradcheck_extended_precision():
    report = model_gradcheck(seed=1, probes=2)
    assert report.finite and report.passed(MODEL_TOLERANCE), report


def test_relu_gradcheck_away_from_kink():
    x = np.array([-2.0, -0.5, 0.7, 1.5])
    assert grad_check(nx.relu, [x]).passed(1e-6)


def test_deterministic_outputs():
    rng = np.random.default_rng(0)
    q, k, v = (rng.standard_normal((16, 2, 4)).astype(np.float32) for _ in range(3))
    a = nx.windowed_attention(Tensor(q), Tensor(k), Tensor(v), 5).data
    b = nx.windowed_attention(Tensor(q), Tensor(k), Tensor(v), 5).data
    assert a.tobytes() == b.tobytes()


def test_float32_by_default():
    assert Tensor([1.0, 2.0]).dtype == np.float32
    with nx.default_dtype(np.float64):
        assert Tensor([1.0]).dtype == np.float64
