"""Numerics foundation: rng streams, init, softmax, bf16, primitives, grad checker."""

import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from switchlab.tensor_core import (
    GradReport,
    InvalidArgumentError,
    NumericError,
    RngStream,
    Tensor,
    add,
    add_backward,
    cumsum,
    cumsum_backward,
    grad_check,
    is_bf16_exact,
    matmul,
    matmul_backward,
    multiply,
    multiply_backward,
    one_hot,
    quantize_bf16,
    reduce_mean,
    reduce_mean_backward,
    reduce_sum,
    reduce_sum_backward,
    relu,
    relu_backward,
    scale,
    scale_backward,
    softmax,
    softmax_backward,
    tensor,
    trunc_normal_init,
)


# ---------------------------------------------------------------------------
# RngStream
# ---------------------------------------------------------------------------


class TestRngStream:
    def test_same_state_same_output(self):
        a = RngStream(7, "init").normal((5,))
        b = RngStream(7, "init").normal((5,))
        assert np.array_equal(a, b)

    def test_counter_advances(self):
        s = RngStream(7)
        first = s.normal((4,))
        second = s.normal((4,))
        assert not np.array_equal(first, second)
        assert s.counter == 2

    def test_substreams_independent_of_order(self):
        s1 = RngStream(3)
        a1 = s1.substream("a").normal((3,))
        b1 = s1.substream("b").normal((3,))
        s2 = RngStream(3)
        b2 = s2.substream("b").normal((3,))
        a2 = s2.substream("a").normal((3,))
        assert np.array_equal(a1, a2)
        assert np.array_equal(b1, b2)

    def test_state_round_trip(self):
        s = RngStream(11, "x")
        s.normal((2,))
        restored = RngStream.from_state(s.state())
        assert np.array_equal(restored.normal((6,)), s.normal((6,)))

    def test_categorical_matches_cdf_inversion(self):
        probs = np.array([[0.5, 0.25, 0.25], [0.1, 0.1, 0.8]])
        draws = RngStream(5).categorical(np.tile(probs, (5000, 1))[:10000])
        frac_last = (draws[1::2] == 2).mean()
        assert abs(frac_last - 0.8) < 0.02


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


def truncated_normal_std_oracle(lo: float = -2.0, hi: float = 2.0) -> float:
    """Std of a unit normal truncated to [lo, hi], by numerical quadrature."""
    grid = np.linspace(lo, hi, 200001)
    density = np.exp(-grid * grid / 2.0) / math.sqrt(2 * math.pi)
    z = np.trapezoid(density, grid)
    mean = np.trapezoid(grid * density, grid) / z
    var = np.trapezoid((grid - mean) ** 2 * density, grid) / z
    return math.sqrt(var)


class TestTruncNormalInit:
    def test_bounds_never_exceeded(self):
        w = trunc_normal_init((200, 50), 0.1, 1000, RngStream(0))
        sigma = math.sqrt(0.1 / 1000)
        assert sigma == pytest.approx(0.01)
        assert np.abs(w).max() <= 2 * sigma

    def test_symmetry(self):
        w = trunc_normal_init((100_000,), 1.0, 1, RngStream(1))
        assert abs(w.mean()) < 0.02

    def test_std_matches_quadrature_oracle(self):
        # sigma = sqrt(0.1/10) = 0.1; truncation at 2 sigma shrinks the std by
        # the truncated-normal factor computed independently above.
        w = trunc_normal_init((100_000,), 0.1, 10, RngStream(2))
        expected = truncated_normal_std_oracle() * math.sqrt(0.1 / 10)
        assert w.std() == pytest.approx(expected, rel=0.02)

    def test_invalid_arguments(self):
        with pytest.raises(InvalidArgumentError):
            trunc_normal_init((3,), 0.0, 4, RngStream(0))
        with pytest.raises(InvalidArgumentError):
            trunc_normal_init((3,), 0.1, 0, RngStream(0))

    def test_deterministic(self):
        a = trunc_normal_init((7, 3), 0.5, 9, RngStream(42, "w"))
        b = trunc_normal_init((7, 3), 0.5, 9, RngStream(42, "w"))
        assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# Softmax
# ---------------------------------------------------------------------------


class TestSoftmax:
    def test_uniform(self):
        assert np.allclose(softmax(np.zeros(3)), [1 / 3] * 3)

    def test_known_values(self):
        # direct evaluation of exp(h_i)/sum exp(h_j) at extended precision
        out = softmax(np.array([2.0, 1.0, 0.0]))
        assert np.allclose(out, [0.66524, 0.24473, 0.09003], atol=1e-5)

    def test_large_logits_no_overflow(self):
        out = softmax(np.array([1000.0, 0.0]))
        assert np.isfinite(out).all()
        assert np.allclose(out, [1.0, 0.0])

    def test_sums_to_one(self):
        rng = RngStream(3)
        x = rng.normal((50, 7)) * 30
        out = softmax(x, axis=-1)
        assert np.abs(out.sum(axis=-1) - 1.0).max() < 1e-6
        assert (out > 0).all()

    def test_non_finite_rejected(self):
        with pytest.raises(NumericError):
            softmax(np.array([np.inf, 0.0]))

    def test_backward_matches_fd(self):
        x = RngStream(4).normal((6,))

        def f(params):
            s = softmax(params[0])
            loss = float((s**3).sum())
            return loss, [softmax_backward(3 * s**2, s)]

        assert grad_check(f, [x]).passed


# ---------------------------------------------------------------------------
# bfloat16 emulation
# ---------------------------------------------------------------------------


def bf16_oracle(value: np.float32) -> np.float32:
    """Scalar bit-level reference: round-to-nearest-even on the top 16 bits."""
    (bits,) = struct.unpack("<I", struct.pack("<f", value))
    if not math.isfinite(value):
        return value
    low = bits & 0xFFFF
    hi = bits >> 16
    if low > 0x8000 or (low == 0x8000 and hi & 1):
        hi += 1
    (out,) = struct.unpack("<f", struct.pack("<I", (hi << 16) & 0xFFFFFFFF))
    return np.float32(out)


class TestQuantizeBf16:
    def test_exact_values_pass_through(self):
        assert quantize_bf16(np.float32(1.0)) == 1.0
        assert quantize_bf16(np.float32(-0.5)) == -0.5

    def test_tie_rounds_to_even(self):
        # 1 + 2^-8 sits exactly between 1.0 and the next bfloat16 (1.0078125)
        assert quantize_bf16(np.float32(1.00390625)) == np.float32(1.0)
        # 1 + 3 * 2^-8 ties between 1.0078125 and 1.015625; even mantissa wins
        assert quantize_bf16(np.float32(1.01171875)) == np.float32(1.015625)

    def test_matches_bit_oracle_on_random_values(self):
        rng = RngStream(9)
        vals = np.concatenate(
            [
                (rng.normal((40_000,)) * np.exp(rng.normal((40_000,)) * 8)).astype(np.float32),
                rng.normal((10_000,)).astype(np.float32),
            ]
        )
        ours = quantize_bf16(vals)
        oracle = np.array([bf16_oracle(v) for v in vals], dtype=np.float32)
        assert np.array_equal(ours, oracle)

    def test_idempotent(self):
        vals = (RngStream(10).normal((10_000,)) * 100).astype(np.float32)
        once = quantize_bf16(vals)
        assert np.array_equal(quantize_bf16(once), once)

    def test_infinities_and_nan(self):
        out = quantize_bf16(np.array([np.inf, -np.inf, np.nan], dtype=np.float32))
        assert out[0] == np.inf and out[1] == -np.inf and np.isnan(out[2])

    def test_overflow_to_infinity(self):
        # finite float32 values beyond the bfloat16 maximum round up to inf
        assert quantize_bf16(np.float32(3.4e38)) == np.inf

    @given(
        st.floats(allow_nan=False, allow_infinity=False, width=32),
        st.floats(allow_nan=False, allow_infinity=False, width=32),
    )
    @settings(max_examples=300, deadline=None)
    def test_monotone(self, a, b):
        lo, hi = sorted((a, b))
        qlo, qhi = quantize_bf16(np.float32(lo)), quantize_bf16(np.float32(hi))
        assert qlo <= qhi

    def test_tensor_tagging(self):
        t = tensor([1.0, 2.5, 3.25])
        q = quantize_bf16(t)
        assert isinstance(q, Tensor)
        assert q.precision_tag == "bf16"
        assert is_bf16_exact(q)

    def test_bf16_tag_validated(self):
        with pytest.raises(InvalidArgumentError):
            Tensor(np.array([1.0 + 2**-12], dtype=np.float32), "bf16")


# ---------------------------------------------------------------------------
# Primitive ops
# ---------------------------------------------------------------------------


class TestPrimitives:
    def test_relu_backward_definition(self):
        x = np.array([-1.0, 2.0])
        g = np.array([5.0, 7.0])
        assert np.array_equal(relu_backward(g, x), [0.0, 7.0])

    def test_cumsum_definition(self):
        assert np.array_equal(cumsum(np.ones(3), 0), [1.0, 2.0, 3.0])

    def test_shape_mismatch_messages_carry_both_shapes(self):
        with pytest.raises(InvalidArgumentError, match=r"\(2,\).*\(3,\)"):
            add(np.zeros(2), np.zeros(3))
        with pytest.raises(InvalidArgumentError, match=r"\(2, 3\).*\(2, 2\)"):
            matmul(np.zeros((2, 3)), np.zeros((2, 2)))

    def test_one_hot(self):
        out = one_hot(np.array([2, 0]), 3)
        assert np.array_equal(out, [[0, 0, 1], [1, 0, 0]])
        with pytest.raises(InvalidArgumentError):
            one_hot(np.array([3]), 3)

    def test_matmul_backward_vs_fd(self):
        rng = RngStream(12)
        a = rng.normal((3, 4))
        b = rng.normal((4, 2))

        def f(params):
            y = matmul(params[0], params[1])
            ga, gb = matmul_backward(2 * y, params[0], params[1])
            return float((y**2).sum()), [ga, gb]

        assert grad_check(f, [a, b]).max_rel_err < 1e-4

    @pytest.mark.parametrize("axis", [None, 0, 1])
    def test_reduce_sum_backward_vs_fd(self, axis):
        x = RngStream(13).normal((4, 3))

        def f(params):
            y = reduce_sum(params[0], axis)
            loss = float((y**2).sum())
            return loss, [reduce_sum_backward(2 * y, params[0].shape, axis)]

        assert grad_check(f, [x]).passed

    @pytest.mark.parametrize("axis", [None, 0, 1])
    def test_reduce_mean_backward_vs_fd(self, axis):
        x = RngStream(14).normal((4, 3))

        def f(params):
            y = reduce_mean(params[0], axis)
            loss = float((y**2).sum())
            return loss, [reduce_mean_backward(2 * y, params[0].shape, axis)]

        assert grad_check(f, [x]).passed

    def test_multiply_add_scale_cumsum_backward_vs_fd(self):
        rng = RngStream(15)
        a, b = rng.normal((5,)), rng.normal((5,))

        def f(params):
            u = multiply(params[0], params[1])
            v = add(u, params[0])
            w = scale(v, 1.5)
            c = cumsum(w, 0)
            loss = float((c**2).sum())
            gc = 2 * c
            gw = cumsum_backward(gc, 0)
            gv = scale_backward(gw, 1.5)
            gu, ga_extra = add_backward(gv)
            ga, gb = multiply_backward(gu, params[0], params[1])
            return loss, [ga + ga_extra, gb]

        assert grad_check(f, [a, b]).passed

    def test_determinism(self):
        rng = RngStream(16)
        a = rng.normal((8, 8))
        b = rng.normal((8, 8))
        assert np.array_equal(matmul(a, b), matmul(a.copy(), b.copy()))


# ---------------------------------------------------------------------------
# Gradient checker
# ---------------------------------------------------------------------------


class TestGradCheck:
    def test_quadratic_is_exact(self):
        def f(params):
            x = params[0]
            return float((x**2).sum()), [2 * x]

        report = grad_check(f, [np.array([1.0, 2.0])])
        assert report.passed
        assert report.max_rel_err < 1e-6

    def test_softmax_cross_entropy_composite(self):
        logits = RngStream(17).normal((4, 5))
        target = np.array([0, 2, 1, 4])

        def f(params):
            p = softmax(params[0], axis=-1)
            loss = float(-np.log(p[np.arange(4), target]).mean())
            g = p.copy()
            g[np.arange(4), target] -= 1.0
            return loss, [g / 4]

        assert grad_check(f, [logits]).max_rel_err < 1e-4

    def test_corrupted_gradient_fails(self):
        def f(params):
            x = params[0]
            g = 2 * x
            g[0] += 0.1  # deliberate corruption
            return float((x**2).sum()), [g]

        report = grad_check(f, [np.array([1.0, 2.0])])
        assert not report.passed
        assert report.details

    def test_non_finite_loss_raises(self):
        def f(params):
            return float("nan"), [np.zeros_like(params[0])]

        with pytest.raises(NumericError):
            grad_check(f, [np.zeros(2)])

    def test_report_fields(self):
        def f(params):
            return float(params[0].sum()), [np.ones_like(params[0])]

        report = grad_check(f, [np.zeros(3)], h=1e-3, tol=1e-4)
        assert isinstance(report, GradReport)
        assert report.tol == 1e-4
        assert len(report.param_errors) == 1
