import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cakt.history import (
    ConceptHistoryIndex,
    ExponentialDecay,
    apply_exponential_decay,
    gather_same_concept,
    history_indices,
    reshape_stack,
)


def build_index(concepts, dim=4):
    idx = ConceptHistoryIndex()
    for step, c in enumerate(concepts):
        idx.add(step, c, np.full(dim, float(step + 1)))
    return idx


class TestGather:
    def test_recency_rule(self):
        idx = build_index([1, 2, 1, 1])
        slots, gaps, pad = gather_same_concept(idx, t=3, next_concept=1, k=2)
        assert gaps == [2, 1]
        assert pad == [False, False]
        assert slots[0][0] == 3.0  # step 2
        assert slots[1][0] == 4.0  # step 3

    def test_no_matches_all_padding(self):
        idx = build_index([1, 2, 1, 1])
        slots, gaps, pad = gather_same_concept(idx, t=3, next_concept=5, k=2)
        assert pad == [True, True]
        assert gaps == [0, 0]
        assert all(np.all(s == 0) for s in slots)

    def test_prepend_padding(self):
        idx = build_index([1])
        slots, gaps, pad = gather_same_concept(idx, t=0, next_concept=1, k=3)
        assert pad == [True, True, False]
        assert gaps == [0, 0, 1]
        assert np.all(slots[0] == 0) and np.all(slots[1] == 0)
        assert slots[2][0] == 1.0

    @given(
        concepts=st.lists(st.integers(0, 3), min_size=2, max_size=30),
        k=st.integers(1, 5),
    )
    @settings(max_examples=60, deadline=None)
    def test_matches_brute_force(self, concepts, k):
        idx = build_index(concepts)
        for t in range(len(concepts) - 1):
            c = concepts[t + 1]
            slots, gaps, pad = gather_same_concept(idx, t, c, k)
            expected = [s for s in range(t + 1) if concepts[s] == c][-k:]
            real = [int(slot[0] - 1) for slot, p in zip(slots, pad) if not p]
            assert real == expected
            assert [g for g, p in zip(gaps, pad) if not p] == [(t + 1) - s for s in expected]

    @given(
        concepts=st.lists(st.integers(0, 3), min_size=2, max_size=25),
        k=st.integers(1, 4),
    )
    @settings(max_examples=60, deadline=None)
    def test_incremental_index_matches_vectorized(self, concepts, k):
        # The batched gather plan agrees with the step-by-step index at every t.
        idx_arr, gaps_arr = history_indices(concepts, k)
        index = build_index(concepts)
        for t in range(len(concepts) - 1):
            slots, gaps, pad = gather_same_concept(index, t, concepts[t + 1], k)
            steps = [int(s[0] - 1) if not p else -1 for s, p in zip(slots, pad)]
            assert steps == idx_arr[t].tolist()
            assert gaps == [int(g) for g in gaps_arr[t]]


class TestDecay:
    def test_gap_zero_is_identity(self):
        out = apply_exponential_decay([np.array([2.0, 4.0])], [0], [False], theta=3.0)
        np.testing.assert_allclose(out[0], [2.0, 4.0])

    def test_gap_equals_theta(self):
        out = apply_exponential_decay([np.array([2.0, 4.0])], [5], [False], theta=5.0)
        np.testing.assert_allclose(out[0], [0.735759, 1.471518], atol=1e-5)

    def test_half_life(self):
        theta = 4.0
        out = apply_exponential_decay([np.array([1.0])], [theta * math.log(2)], [False], theta=theta)
        np.testing.assert_allclose(out[0], [0.5], rtol=1e-12)

    def test_padding_untouched(self):
        z = np.zeros(2)
        out = apply_exponential_decay([z, np.ones(2)], [0, 3], [True, False], theta=1.0)
        np.testing.assert_array_equal(out[0], z)

    def test_invalid_theta(self):
        with pytest.raises(ValueError):
            apply_exponential_decay([np.ones(2)], [1], [False], theta=0.0)

    @pytest.mark.parametrize("theta", [1.0, 6.0, 50.0])
    def test_strictly_decreasing_in_gap(self, theta):
        gaps = torch.arange(0, 51, dtype=torch.float64)
        factor = torch.exp(-gaps / theta)
        assert torch.all(factor[1:] < factor[:-1])
        assert torch.all(factor > 0) and torch.all(factor <= 1)

    def test_module_scale_and_init(self):
        dec = ExponentialDecay(init_theta=6.0)
        assert dec.theta.item() == pytest.approx(6.0, rel=1e-2)
        assert dec.scale(torch.tensor(0.0)).item() == 1.0

    def test_module_forward_matches_functional(self):
        dec = ExponentialDecay(init_theta=2.0).double()
        slots = torch.randn(3, 4, dtype=torch.float64)
        gaps = torch.tensor([0.0, 1.0, 5.0], dtype=torch.float64)
        pad = torch.tensor([True, False, False])
        out = dec(slots, gaps, pad)
        theta = dec.theta.item()
        expected = apply_exponential_decay(
            [s.numpy() for s in slots], gaps.tolist(), pad.tolist(), theta
        )
        np.testing.assert_array_equal(out[0].detach().numpy(), slots[0].numpy())
        for i in (1, 2):
            np.testing.assert_allclose(out[i].detach().numpy(), expected[i], rtol=1e-12)

    def test_gradient_wrt_theta_matches_finite_difference(self):
        # d(exp(-g/theta))/d theta = (g / theta^2) * exp(-g/theta) > 0 for g > 0
        for theta0, gap in [(2.0, 1.0), (6.0, 4.0), (10.0, 25.0)]:
            theta = torch.tensor(theta0, dtype=torch.float64, requires_grad=True)
            scale = torch.exp(-gap / theta)
            (analytic,) = torch.autograd.grad(scale, theta)
            h = 1e-6
            fd = (math.exp(-gap / (theta0 + h)) - math.exp(-gap / (theta0 - h))) / (2 * h)
            assert analytic.item() > 0
            assert abs(analytic.item() - fd) / max(abs(fd), 1e-12) < 1e-5


class TestReshapeStack:
    def test_row_major(self):
        ht = reshape_stack([np.array([1.0, 2.0, 3.0, 4.0])], H=2, W=2)
        np.testing.assert_array_equal(ht.values[0].numpy(), [[1, 2], [3, 4]])

    def test_identical_slices(self):
        v = np.arange(4.0)
        ht = reshape_stack([v, v], H=2, W=2)
        assert torch.equal(ht.values[0], ht.values[1])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            reshape_stack([np.arange(5.0)], H=3, W=2)

    @given(st.integers(1, 6), st.integers(1, 6))
    @settings(max_examples=30, deadline=None)
    def test_flatten_inverts_reshape(self, H, W):
        v = np.random.default_rng(0).normal(size=H * W)
        ht = reshape_stack([v], H=H, W=W)
        np.testing.assert_array_equal(ht.values[0].flatten().numpy(), v)
