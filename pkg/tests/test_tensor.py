"""Tests for the gradient tape.

Analytic gradients are checked against central finite differences computed
here with plain numpy, so the oracle never shares code with the tape.
"""

import numpy as np
import pytest

from mvswhiten.errors import ContractError, DimensionError, NumericalError
from mvswhiten.tensor import (
    Tape,
    Tensor,
    finite_diff_check,
    matmul,
    primitive,
    tensor_abs,
)


def numeric_grad(fn, x, h=1e-6):
    """Central-difference gradient of a scalar numpy function."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        up = x.copy()
        up.reshape(-1)[i] += h
        down = x.copy()
        down.reshape(-1)[i] -= h
        g.reshape(-1)[i] = (fn(up) - fn(down)) / (2 * h)
    return g


class TestBasics:
    def test_scalars_become_rank_one(self):
        t = Tensor(3.0)
        assert t.shape == (1,)
        assert t.item() == 3.0

    def test_float64_contiguous(self):
        t = Tensor(np.arange(6, dtype=np.float32).reshape(2, 3)[:, ::-1])
        assert t.data.dtype == np.float64
        assert t.data.flags["C_CONTIGUOUS"]

    def test_zero_length_dim_rejected(self):
        with pytest.raises(DimensionError):
            Tensor(np.zeros((2, 0)))

    def test_nonfinite_creation_rejected(self):
        with pytest.raises(NumericalError):
            Tensor([1.0, np.nan])

    def test_item_requires_single_element(self):
        with pytest.raises(DimensionError):
            Tensor([1.0, 2.0]).item()


class TestOps:
    def test_identity_matmul_gradient_is_ones(self):
        tape = Tape()
        x = tape.leaf(np.arange(9.0).reshape(3, 3))
        out = matmul(Tensor(np.eye(3)), x).sum()
        tape.backward(out)
        np.testing.assert_array_equal(x.grad, np.ones((3, 3)))

    def test_matmul_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        a = rng.normal(size=(4, 5))
        b = rng.normal(size=(5, 3))
        report = finite_diff_check(lambda t: matmul(t, Tensor(b)).sum(), a)
        assert report.max_rel_err <= 1e-6
        report = finite_diff_check(lambda t: matmul(Tensor(a), t).sum(), b)
        assert report.max_rel_err <= 1e-6

    def test_matmul_shape_errors(self):
        with pytest.raises(DimensionError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
        with pytest.raises(DimensionError):
            matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 2))))

    def test_mean_gradient_is_uniform(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(3, 4))
        tape = Tape()
        leaf = tape.leaf(x)
        tape.backward(leaf.mean())
        np.testing.assert_allclose(leaf.grad, np.full((3, 4), 1.0 / 12.0))
        report = finite_diff_check(lambda t: t.mean(), x, h=1e-4, tol=1e-8)
        assert report.passed, report

    def test_reductions_over_axes(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(2, 3, 4))
        for axis in (0, 1, 2, (0, 2), None):
            tape = Tape()
            leaf = tape.leaf(x)
            out = leaf.sum(axis=axis).mean()
            tape.backward(out)
            oracle = numeric_grad(lambda a, ax=axis: np.sum(a, axis=ax).mean(), x)
            np.testing.assert_allclose(leaf.grad, oracle, atol=1e-8)

    def test_abs_subgradient_zero_at_kink(self):
        tape = Tape()
        x = tape.leaf(np.array([-2.0, 0.0, 3.0]))
        tape.backward(tensor_abs(x).sum())
        np.testing.assert_array_equal(x.grad, [-1.0, 0.0, 1.0])

    def test_clamp_min_gradient(self):
        tape = Tape()
        x = tape.leaf(np.array([-1.0, 0.5, 2.0]))
        tape.backward(x.clamp_min(0.5).sum())
        # at the hinge itself the subgradient is 0, matching abs at 0
        np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])

    def test_scalar_arithmetic(self):
        tape = Tape()
        x = tape.leaf(np.array([1.0, 2.0]))
        out = ((2.0 * x + 1.0) - 0.5).sum()
        tape.backward(out)
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])
        assert out.item() == pytest.approx(7.0)

    def test_elementwise_shape_mismatch(self):
        with pytest.raises(DimensionError):
            Tensor(np.ones(3)) + Tensor(np.ones(4))

    def test_reshape_transpose_roundtrip_gradient(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(3, 4))
        report = finite_diff_check(
            lambda t: (t.T.reshape((2, 6)) * Tensor(np.arange(12.0).reshape(2, 6))).sum(),
            x)
        assert report.passed, report

    def test_matmul_associativity(self):
        rng = np.random.default_rng(8)
        a = rng.normal(size=(4, 5))
        b = rng.normal(size=(5, 6))
        c = rng.normal(size=(6, 3))
        left = matmul(matmul(Tensor(a), Tensor(b)), Tensor(c)).data
        right = matmul(Tensor(a), matmul(Tensor(b), Tensor(c))).data
        np.testing.assert_allclose(left, right, rtol=1e-9)

    @pytest.mark.filterwarnings("ignore:overflow")
    def test_nan_in_op_output_raises(self):
        big = Tensor(np.array([1e308]))
        with pytest.raises(NumericalError):
            big + big


class TestTape:
    def test_gradient_linearity(self):
        rng = np.random.default_rng(21)
        x = rng.normal(size=(5,))
        w = rng.normal(size=(5,))

        def grad_of(fn):
            tape = Tape()
            leaf = tape.leaf(x)
            tape.backward(fn(leaf))
            return leaf.grad.copy()

        f = lambda t: (t * Tensor(w)).sum()
        g = lambda t: tensor_abs(t).mean()
        combined = grad_of(lambda t: f(t) + g(t))
        np.testing.assert_allclose(combined, grad_of(f) + grad_of(g), atol=1e-10)

    def test_backward_is_idempotent(self):
        tape = Tape()
        x = tape.leaf(np.array([1.0, -2.0]))
        out = (x * x).sum()
        tape.backward(out)
        first = x.grad.copy()
        tape.backward(out)
        np.testing.assert_array_equal(x.grad, first)

    def test_unused_leaf_gets_zero_grad(self):
        tape = Tape()
        x = tape.leaf(np.array([1.0]))
        y = tape.leaf(np.array([4.0, 5.0]))
        tape.backward(x * 3.0)
        np.testing.assert_array_equal(y.grad, np.zeros(2))

    def test_recording_after_backward_rejected(self):
        tape = Tape()
        x = tape.leaf(np.array([1.0]))
        tape.backward(x * 2.0)
        with pytest.raises(ContractError):
            x + x

    def test_mixing_tapes_rejected(self):
        a = Tape().leaf(np.ones(2))
        b = Tape().leaf(np.ones(2))
        with pytest.raises(ContractError):
            a + b

    def test_backward_needs_scalar(self):
        tape = Tape()
        x = tape.leaf(np.ones(3))
        with pytest.raises(ContractError):
            tape.backward(x * 1.0)

    def test_constants_do_not_record(self):
        tape = Tape()
        x = tape.leaf(np.ones(2))
        before = len(tape._nodes)
        Tensor(np.ones(2)) + Tensor(np.ones(2))
        assert len(tape._nodes) == before
        tape.backward(x.sum())

    def test_primitive_hook(self):
        tape = Tape()
        x = tape.leaf(np.array([2.0, 3.0]))
        doubled = primitive([x], x.data * 2.0, lambda g: (g * 2.0,), name="double")
        tape.backward(doubled.sum())
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])


class TestFiniteDiff:
    def test_seeded_chains_pass(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            x = rng.normal(size=(3, 4))
            w = rng.normal(size=(4, 2))
            b = rng.normal(size=(3, 2))
            # keep entries away from the abs kink so differences are clean
            fn = lambda t: tensor_abs(matmul(t, Tensor(w)) - Tensor(b)).mean()
            if np.abs(x @ w - b).min() < 1e-3:
                continue
            report = finite_diff_check(fn, x)
            assert report.passed, f"seed {seed}: {report}"

    def test_report_fields(self):
        report = finite_diff_check(lambda t: (t * t).sum(), np.array([1.0, 2.0]))
        assert report.passed
        assert report.analytic.shape == (2,)
        assert report.numeric.shape == (2,)
        assert report.max_rel_err < 1e-6

    def test_non_scalar_output_rejected(self):
        with pytest.raises(ContractError):
            finite_diff_check(lambda t: t * 2.0, np.ones(3))
