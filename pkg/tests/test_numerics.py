import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from omnitrack.numerics import (NEG_INF, DegenerateInputError, NumericError, ShapeError, check_function,
                             cosine_similarity, finite_difference_gradient, gradient_check, keep_mask_to_additive,
                             layer_norm, masked_softmax, safe_cosine, value_and_grad)

D = torch.float64


def t(x):
    return torch.tensor(x, dtype=D)


def np_masked_softmax(logits, keep):
    out = np.zeros_like(logits)
    for i, (row, k) in enumerate(zip(logits, keep)):
        if not k.any():
            continue
        e = np.exp(row[k] - row[k].max())
        out[i, k] = e / e.sum()
    return out


class TestMaskedSoftmax:
    def test_hand_value(self):
        out = masked_softmax(t([0.0, math.log(2)]), t([0.0, 0.0]))
        assert torch.allclose(out, t([1 / 3, 2 / 3]), atol=1e-15)

    def test_single_unmasked(self):
        out = masked_softmax(t([5.0, 7.0]), t([0.0, NEG_INF]))
        assert out.tolist() == [1.0, 0.0]

    def test_fully_masked_row_is_zero(self):
        out = masked_softmax(t([3.0, 3.0]), t([NEG_INF, NEG_INF]))
        assert out.tolist() == [0.0, 0.0]
        assert torch.isfinite(out).all()

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            masked_softmax(torch.zeros(2, 3, dtype=D), torch.zeros(2, 4, dtype=D))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 10_000), st.floats(-50, 50))
    def test_against_numpy_and_shift(self, rows, cols, seed, shift):
        rng = np.random.default_rng(seed)
        logits = rng.normal(0, 3, (rows, cols))
        keep = rng.random((rows, cols)) > 0.4
        mask = keep_mask_to_additive(torch.as_tensor(keep))
        out = masked_softmax(t(logits), mask)
        assert np.allclose(out.numpy(), np_masked_softmax(logits, keep), atol=1e-12)
        sums = out.sum(-1).numpy()
        assert np.all((np.abs(sums - 1) < 1e-12) | (np.abs(sums) < 1e-12))
        assert np.all(out.numpy()[~keep] == 0.0)
        shifted = masked_softmax(t(logits + shift), mask)
        assert torch.allclose(out, shifted, atol=1e-12)

    def test_gradient_through_masked_entries_is_finite(self):
        x = torch.randn(3, 4, dtype=D, requires_grad=True)
        mask = keep_mask_to_additive(torch.tensor([[1, 0, 1, 0], [0, 0, 0, 0], [1, 1, 1, 1]], dtype=torch.bool))
        (masked_softmax(x, mask) * torch.randn(3, 4, dtype=D)).sum().backward()
        assert torch.isfinite(x.grad).all()
        assert (x.grad[1] == 0).all()


class TestLayerNorm:
    def test_constant_row(self):
        assert layer_norm(t([[1.0, 1, 1, 1]]), torch.ones(4, dtype=D), torch.zeros(4, dtype=D)).abs().max() == 0

    def test_fixed_point(self):
        out = layer_norm(t([1.0, -1.0]), torch.ones(2, dtype=D), torch.zeros(2, dtype=D), eps=1e-12)
        assert torch.allclose(out, t([1.0, -1.0]), atol=1e-10)

    def test_affine(self):
        out = layer_norm(t([2.0, 0.0]), t([2.0, 2.0]), t([1.0, 1.0]), eps=1e-12)
        assert torch.allclose(out, t([3.0, -1.0]), atol=1e-10)

    def test_against_torch(self):
        x = torch.randn(5, 7, dtype=D)
        g, b = torch.randn(7, dtype=D), torch.randn(7, dtype=D)
        ref = torch.nn.functional.layer_norm(x, (7,), g, b, 1e-5)
        assert torch.allclose(layer_norm(x, g, b, 1e-5), ref, atol=1e-12)

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            layer_norm(torch.zeros(2, 3, dtype=D), torch.ones(4, dtype=D), torch.zeros(4, dtype=D))

    def test_eps_positive(self):
        with pytest.raises(ValueError):
            layer_norm(torch.zeros(2, 3, dtype=D), torch.ones(3, dtype=D), torch.zeros(3, dtype=D), eps=0.0)


class TestCosine:
    def test_examples(self):
        assert cosine_similarity(t([1.0, 2, 3]), t([1.0, 2, 3])) == pytest.approx(1.0, abs=1e-15)
        assert cosine_similarity(t([1.0, 0]), t([0.0, 1])) == 0.0
        assert cosine_similarity(t([1.0, 1]), t([1.0, 0])) == pytest.approx(1 / math.sqrt(2), abs=1e-15)

    def test_zero_norm(self):
        with pytest.raises(DegenerateInputError):
            cosine_similarity(t([0.0, 0.0]), t([1.0, 0.0]))
        assert safe_cosine(t([0.0, 0.0]), t([1.0, 0.0])) == 0.0

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.01, 100), st.floats(0.01, 100))
    def test_scale_invariance(self, seed, s, r):
        g = torch.Generator().manual_seed(seed)
        a, b = torch.randn(6, generator=g, dtype=D), torch.randn(6, generator=g, dtype=D)
        assert abs(float(cosine_similarity(s * a, r * b) - cosine_similarity(a, b))) <= 1e-12
        assert -1 <= float(cosine_similarity(a, b)) <= 1


class TestFiniteDifferences:
    def test_square(self):
        g = finite_difference_gradient(lambda x: (x ** 2).sum(), t([3.0]), 1e-6)
        assert abs(float(g[0]) - 6.0) < 1e-6

    def test_constant_and_linear(self):
        x = torch.randn(4, 3, dtype=D)
        assert finite_difference_gradient(lambda v: torch.tensor(2.5), x).abs().max() == 0
        assert torch.allclose(finite_difference_gradient(lambda v: v.sum(), x), torch.ones(4, 3, dtype=D), atol=1e-8)

    def test_non_contiguous_input(self):
        x = torch.randn(3, 5, dtype=D).T
        assert not x.is_contiguous()
        w = torch.randn(5, 3, dtype=D)
        assert torch.allclose(finite_difference_gradient(lambda v: (v * w).sum(), x), w, atol=1e-8)

    def test_non_finite(self):
        with pytest.raises(NumericError):
            finite_difference_gradient(lambda v: torch.log(v).sum(), t([0.0]))

    def test_bad_step(self):
        with pytest.raises(ValueError):
            finite_difference_gradient(lambda v: v.sum(), t([1.0]), 0.0)


class TestGradientCheck:
    def test_equal(self):
        r = gradient_check(t([1.0, 2.0]), t([1.0, 2.0]))
        assert r.passed and r.max_rel_error == 0 and r.checked_count == 2

    def test_close(self):
        assert gradient_check(t([1.0]), t([1.0001]), rtol=1e-3).passed

    def test_far(self):
        r = gradient_check(t([1.0]), t([2.0]), rtol=1e-3, atol=1e-6)
        assert not r.passed and r.max_rel_error == pytest.approx(0.5)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            gradient_check(t([1.0]), t([1.0, 2.0]))

    def test_value_and_grad(self):
        v, (g,) = value_and_grad(lambda x: (x ** 3).sum(), t([2.0]))
        assert v == 8.0 and float(g[0]) == 12.0

    def test_check_function(self):
        r = check_function(lambda a, b: (a @ b).sin().sum(), [torch.randn(3, 4, dtype=D), torch.randn(4, 2, dtype=D)])
        assert r.passed and r.checked_count == 20
