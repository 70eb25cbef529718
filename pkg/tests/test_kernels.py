"""Kernel tests: frozen hand-derived values plus independent oracles."""

import math

import numpy as np
import pytest

from gemfilter.counting import CostSession
from gemfilter.errors import ContractViolation
from gemfilter.kernels import (
    argmax,
    avg_pool_1d,
    matmul,
    max_pool_1d,
    pool_1d,
    rms_norm,
    rms_norm_rows,
    softmax_rows,
    topk_indices,
)

F32 = np.float32


# ---------------------------------------------------------------- oracles


def pool_oracle(v, kernel):
    """Direct zero-padded window sum divided by the kernel size."""
    half = kernel // 2
    out = np.zeros(len(v), dtype=np.float64)
    for i in range(len(v)):
        total = 0.0
        for j in range(i - half, i + half + 1):
            if 0 <= j < len(v):
                total += float(v[j])
        out[i] = total / kernel
    return out


def topk_oracle(v, k):
    """Full sort by (-value, index)."""
    return sorted(range(len(v)), key=lambda i: (-float(v[i]), i))[:k]


def argmax_oracle(v):
    best = 0
    for i in range(1, len(v)):
        if float(v[i]) > float(v[best]):
            best = i
    return best


# ---------------------------------------------------------------- matmul


class TestMatmul:
    def test_identity_left(self):
        a = np.asarray([[1, 2], [3, 4]], dtype=F32)
        assert np.array_equal(matmul(np.eye(2, dtype=F32), a), a)

    def test_identity_right_counts_16_flops(self):
        a = np.asarray([[1, 2], [3, 4]], dtype=F32)
        session = CostSession()
        with session.activate():
            out = matmul(a, np.eye(2, dtype=F32))
        assert np.array_equal(out, a)
        assert session.phase_cost("prompt").matmul_flops == 16

    def test_hand_expanded_dot_product(self):
        out = matmul(np.asarray([[1.0, 2.0]], dtype=F32), np.asarray([[3.0], [4.0]], dtype=F32))
        assert out.shape == (1, 1)
        assert out[0, 0] == pytest.approx(11.0)

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ContractViolation):
            matmul(np.zeros((2, 3), dtype=F32), np.zeros((2, 3), dtype=F32))

    def test_non_2d_rejected(self):
        with pytest.raises(ContractViolation):
            matmul(np.zeros(3, dtype=F32), np.zeros((3, 3), dtype=F32))

    def test_composite_flop_counter_is_exact_sum(self):
        rng = np.random.default_rng(0)
        session = CostSession()
        expected = 0
        with session.activate():
            for _ in range(50):
                m, k, n = rng.integers(1, 12, size=3)
                matmul(
                    rng.standard_normal((m, k), dtype=F32),
                    rng.standard_normal((k, n), dtype=F32),
                )
                expected += 2 * int(m) * int(k) * int(n)
        assert session.phase_cost("prompt").matmul_flops == expected

    def test_no_session_no_counting(self):
        out = matmul(np.ones((2, 2), dtype=F32), np.ones((2, 2), dtype=F32))
        assert np.array_equal(out, 2 * np.ones((2, 2), dtype=F32))


# ---------------------------------------------------------------- softmax


class TestSoftmaxRows:
    def test_symmetric_pair(self):
        assert softmax_rows(np.asarray([0.0, 0.0], dtype=F32)) == pytest.approx([0.5, 0.5])

    def test_analytic_closed_form(self):
        out = softmax_rows(np.asarray([0.0, math.log(3.0)], dtype=F32))
        assert out == pytest.approx([0.25, 0.75], abs=1e-6)

    def test_large_inputs_no_overflow(self):
        out = softmax_rows(np.asarray([1000.0, 1000.0, 1000.0], dtype=F32))
        assert np.all(np.isfinite(out))
        assert out == pytest.approx([1 / 3] * 3, abs=1e-6)

    def test_rows_sum_to_one_random(self):
        rng = np.random.default_rng(1)
        for scale in (1.0, 1e3):
            m = (rng.standard_normal((40, 17)) * scale).astype(F32)
            out = softmax_rows(m)
            assert np.all(np.isfinite(out))
            np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)


# ---------------------------------------------------------------- rms norm


class TestRmsNorm:
    def test_all_ones_fixed_point(self):
        ones = np.ones(5, dtype=F32)
        assert rms_norm(ones, ones, 0.0) == pytest.approx([1.0] * 5)

    def test_signed_pair(self):
        out = rms_norm(np.asarray([3.0, -3.0], dtype=F32), np.ones(2, dtype=F32), 0.0)
        assert out == pytest.approx([1.0, -1.0])

    def test_against_literal_formula(self):
        x = np.asarray([1.0, 2.0, 2.0], dtype=F32)
        gain = np.asarray([2.0, 2.0, 2.0], dtype=F32)
        expected = [
            float(xi) * float(gi) / math.sqrt((1 + 4 + 4) / 3)
            for xi, gi in zip(x, gain)
        ]
        assert rms_norm(x, gain, 0.0) == pytest.approx(expected, rel=1e-6)

    def test_length_mismatch(self):
        with pytest.raises(ContractViolation):
            rms_norm(np.ones(3, dtype=F32), np.ones(2, dtype=F32), 0.0)

    def test_rows_variant_matches_vector_kernel(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((6, 9)).astype(F32)
        gain = rng.standard_normal(9).astype(F32)
        rows = rms_norm_rows(x, gain, 1e-5)
        for i in range(x.shape[0]):
            np.testing.assert_allclose(rows[i], rms_norm(x[i], gain, 1e-5), rtol=1e-6)


# ---------------------------------------------------------------- pooling


class TestAvgPool1d:
    def test_frozen_plateau(self):
        out = avg_pool_1d(np.asarray([1.0, 1.0, 1.0, 1.0, 1.0]), 5)
        assert out == pytest.approx([0.6, 0.8, 1.0, 0.8, 0.6])

    def test_kernel_one_is_identity(self):
        v = np.asarray([3.0, -1.0, 2.0], dtype=F32)
        assert np.array_equal(avg_pool_1d(v, 1), v)

    def test_single_spike_spreads(self):
        out = avg_pool_1d(np.asarray([0.0, 0.0, 5.0, 0.0, 0.0]), 5)
        assert out == pytest.approx([1.0, 1.0, 1.0, 1.0, 1.0])

    def test_even_kernel_rejected(self):
        with pytest.raises(ContractViolation):
            avg_pool_1d(np.ones(4), 2)

    def test_against_window_oracle_1000_trials(self):
        rng = np.random.default_rng(3)
        for _ in range(1000):
            n = int(rng.integers(1, 24))
            kernel = int(rng.choice([1, 3, 5, 7]))
            v = rng.standard_normal(n)
            np.testing.assert_allclose(avg_pool_1d(v, kernel), pool_oracle(v, kernel), atol=1e-6)

    def test_sum_conservation_minus_boundary_leakage(self):
        rng = np.random.default_rng(4)
        v = rng.standard_normal(32)
        kernel = 5
        pooled = avg_pool_1d(v, kernel)
        # The oracle accounts for exactly the same boundary leakage.
        assert pooled.sum() == pytest.approx(pool_oracle(v, kernel).sum(), abs=1e-9)


class TestMaxPool1d:
    def test_against_window_oracle(self):
        rng = np.random.default_rng(40)
        for _ in range(200):
            n = int(rng.integers(1, 20))
            kernel = int(rng.choice([1, 3, 5]))
            v = rng.standard_normal(n)
            half = kernel // 2
            oracle = [
                max(v[max(0, i - half) : min(n, i + half + 1)]) for i in range(n)
            ]
            np.testing.assert_allclose(max_pool_1d(v, kernel), oracle)

    def test_negative_values_not_zero_clamped(self):
        out = max_pool_1d(np.asarray([-3.0, -2.0, -5.0]), 3)
        assert out.tolist() == [-2.0, -2.0, -2.0]

    def test_even_kernel_rejected(self):
        with pytest.raises(ContractViolation):
            max_pool_1d(np.ones(4), 4)

    def test_pool_dispatch(self):
        v = np.asarray([0.0, 6.0, 0.0])
        assert pool_1d(v, 3, "avg").tolist() == [2.0, 2.0, 2.0]
        assert pool_1d(v, 3, "max").tolist() == [6.0, 6.0, 6.0]
        with pytest.raises(ContractViolation):
            pool_1d(v, 3, "median")


# ---------------------------------------------------------------- top-k


class TestTopkIndices:
    def test_frozen_example(self):
        assert topk_indices(np.asarray([3.0, 1.0, 4.0, 1.0, 5.0]), 2).tolist() == [4, 2]

    def test_ties_break_to_lower_index(self):
        assert topk_indices(np.asarray([7.0, 7.0, 7.0]), 2).tolist() == [0, 1]

    def test_k_equals_length_is_permutation(self):
        rng = np.random.default_rng(5)
        v = rng.standard_normal(11)
        assert sorted(topk_indices(v, 11).tolist()) == list(range(11))

    def test_k_out_of_range(self):
        with pytest.raises(ContractViolation):
            topk_indices(np.ones(3), 4)
        with pytest.raises(ContractViolation):
            topk_indices(np.ones(3), 0)

    def test_against_full_sort_oracle_1000_trials(self):
        rng = np.random.default_rng(6)
        for _ in range(1000):
            n = int(rng.integers(1, 30))
            k = int(rng.integers(1, n + 1))
            # Duplicates included so tie-breaking is exercised.
            v = rng.integers(-4, 5, size=n).astype(np.float64)
            assert topk_indices(v, k).tolist() == topk_oracle(v, k)

    def test_constant_vector_tie_break_rule(self):
        v = np.full(9, 2.5)
        assert topk_indices(v, 4).tolist() == [0, 1, 2, 3]

    def test_invariant_under_strictly_increasing_transforms(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            v = rng.standard_normal(20)
            base = topk_indices(v, 7).tolist()
            assert topk_indices(2.0 * v, 7).tolist() == base
            assert topk_indices(v + 10.0, 7).tolist() == base
            assert topk_indices(0.5 * v - 3.0, 7).tolist() == base


# ---------------------------------------------------------------- argmax


class TestArgmax:
    def test_basic(self):
        assert argmax(np.asarray([0.0, 1.0, 0.0])) == 1

    def test_tie_break(self):
        assert argmax(np.asarray([2.0, 2.0])) == 0

    def test_against_linear_scan_oracle(self):
        rng = np.random.default_rng(8)
        for _ in range(200):
            v = rng.integers(-3, 4, size=int(rng.integers(1, 25))).astype(np.float64)
            assert argmax(v) == argmax_oracle(v)

    def test_empty_rejected(self):
        with pytest.raises(ContractViolation):
            argmax(np.asarray([]))
