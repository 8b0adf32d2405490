import numpy as np
import pytest

from boxshift.geometry import BinningConfig, Box3, Spacing
from boxshift.priors import (
    PriorState,
    allocate_quota,
    budget,
    histogram_of_boxes,
    total_variation,
    update_hist,
    update_mu,
)

SPACING = Spacing(4.0, 4.0, 5.0)
TWO_BINS = BinningConfig(edges=(10.0,))


def small_box():
    # Well under 10 cc.
    return Box3((0, 0, 0), (2, 2, 2))


def large_box():
    # 30^3 voxels = 2160 cc.
    return Box3((0, 0, 0), (30, 30, 30))


class TestMuUpdate:
    def test_worked_value(self):
        state = PriorState(mu=2.0, hist=(1.0, 0.0))
        assert update_mu(state, [4, 4, 4], alpha_mu=0.9) == pytest.approx(3.8, abs=1e-12)

    def test_fixed_point(self):
        state = PriorState(mu=3.0, hist=(1.0, 0.0))
        assert update_mu(state, [3, 3], alpha_mu=0.9) == pytest.approx(3.0)

    def test_all_zero_counts(self):
        state = PriorState(mu=1.0, hist=(1.0, 0.0))
        assert update_mu(state, [0, 0, 0, 0], alpha_mu=0.9) == pytest.approx(0.1, abs=1e-12)

    def test_empty_subject_list_rejected(self):
        with pytest.raises(ValueError):
            update_mu(PriorState(mu=1.0, hist=(1.0,)), [], alpha_mu=0.9)

    def test_geometric_convergence(self):
        state = PriorState(mu=10.0, hist=(1.0,))
        mu = state.mu
        for r in range(1, 7):
            mu = update_mu(PriorState(mu=mu, hist=(1.0,)), [2, 2], alpha_mu=0.9)
            assert mu - 2.0 == pytest.approx(8.0 * 0.1**r, rel=1e-9)


class TestBudget:
    def test_half_of_ten(self):
        assert budget(10.0, 0.5) == 5

    def test_small_product_rounds_to_zero(self):
        assert budget(4.0, 0.1) == 0

    def test_round_half_up(self):
        assert budget(3.4, 1.0) == 3
        assert budget(3.5, 1.0) == 4
        assert budget(5.0, 0.5) == 3  # 2.5 rounds up

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            budget(-1.0, 0.5)
        with pytest.raises(ValueError):
            budget(3.0, 0.0)
        with pytest.raises(ValueError):
            budget(3.0, 1.2)


class TestHistUpdate:
    def test_worked_two_bin_blend(self):
        state = PriorState(mu=1.0, hist=(1.0, 0.0))
        out = update_hist(state, [large_box()], TWO_BINS, SPACING, alpha_h=0.9)
        assert out == pytest.approx((0.1, 0.9), abs=1e-12)
        assert sum(out) == pytest.approx(1.0, abs=1e-12)

    def test_fixed_point(self):
        state = PriorState(mu=1.0, hist=(0.5, 0.5))
        out = update_hist(state, [small_box(), large_box()], TWO_BINS, SPACING, alpha_h=0.9)
        assert out == pytest.approx((0.5, 0.5), abs=1e-12)

    def test_no_boxes_leaves_hist_alone(self):
        state = PriorState(mu=1.0, hist=(0.3, 0.7))
        assert update_hist(state, [], TWO_BINS, SPACING, alpha_h=0.9) == (0.3, 0.7)

    def test_geometric_convergence_toward_constant_input(self):
        hist = (1.0, 0.0)
        for r in range(1, 7):
            hist = update_hist(
                PriorState(mu=1.0, hist=hist), [large_box()], TWO_BINS, SPACING, alpha_h=0.9
            )
            assert hist[0] == pytest.approx(0.1**r, rel=1e-9)

    def test_stays_a_simplex_under_random_updates(self):
        rng = np.random.default_rng(0)
        cfg = BinningConfig()
        hist = tuple([1.0] + [0.0] * (cfg.n_bins - 1))
        for _ in range(300):
            boxes = [
                Box3((0, 0, 0), tuple(rng.uniform(1, 20, 3))) for _ in range(rng.integers(1, 6))
            ]
            hist = update_hist(PriorState(mu=1.0, hist=hist), boxes, cfg, SPACING, 0.9)
            arr = np.asarray(hist)
            assert np.all(arr >= 0)
            assert arr.sum() == pytest.approx(1.0, abs=1e-9)

    def test_bin_count_mismatch_rejected(self):
        with pytest.raises(ValueError):
            update_hist(PriorState(mu=1.0, hist=(1.0,)), [small_box()], TWO_BINS, SPACING, 0.9)


class TestQuota:
    def test_worked_largest_remainder(self):
        q = allocate_quota((0.46, 0.34, 0.20), 5)
        assert q.per_bin == (2, 2, 1)
        assert q.total == 5

    def test_zero_budget(self):
        assert allocate_quota((0.46, 0.34, 0.20), 0).per_bin == (0, 0, 0)

    def test_uniform_ten(self):
        assert allocate_quota((0.1,) * 10, 10).per_bin == (1,) * 10

    def test_ties_break_toward_lower_bins(self):
        assert allocate_quota((0.25, 0.25, 0.25, 0.25), 2).per_bin == (1, 1, 0, 0)

    def test_scale_invariance(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            h = rng.uniform(0, 1, size=rng.integers(2, 12))
            h[rng.integers(h.size)] += 0.5  # ensure positive mass
            n = int(rng.integers(0, 200))
            assert allocate_quota(h, n) == allocate_quota(h * 37.5, n)

    def test_exactness_and_one_slot_error_bound(self):
        rng = np.random.default_rng(2)
        for _ in range(500):
            b = int(rng.integers(1, 16))
            h = rng.dirichlet(np.full(b, 0.7))
            n = int(rng.integers(0, 1000))
            q = allocate_quota(h, n)
            assert q.total == n
            fractional = h / h.sum() * n
            assert np.all(np.abs(np.asarray(q.per_bin) - fractional) < 1.0)

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValueError):
            allocate_quota((0.5, 0.5), -1)
        with pytest.raises(ValueError):
            allocate_quota((0.0, 0.0), 3)
        with pytest.raises(ValueError):
            allocate_quota((-0.1, 1.1), 3)


class TestPriorState:
    def test_simplex_enforced(self):
        with pytest.raises(ValueError):
            PriorState(mu=1.0, hist=(0.5, 0.6))
        with pytest.raises(ValueError):
            PriorState(mu=-1.0, hist=(1.0,))

    def test_histogram_of_boxes(self):
        hist = histogram_of_boxes([small_box(), small_box(), large_box()], TWO_BINS, SPACING)
        assert hist == pytest.approx((2 / 3, 1 / 3))
        with pytest.raises(ValueError):
            histogram_of_boxes([], TWO_BINS, SPACING)


def test_total_variation():
    assert total_variation((1.0, 0.0), (0.0, 1.0)) == 1.0
    assert total_variation((0.5, 0.5), (0.5, 0.5)) == 0.0
    with pytest.raises(ValueError):
        total_variation((1.0,), (0.5, 0.5))
