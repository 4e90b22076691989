"""
収束判定とサンプル数見積もりのテスト
"""

import numpy as np
import pytest

from kv_shapley.core.coalition import SliceSet
from kv_shapley.core.errors import ConfigurationError
from kv_shapley.core.games import random_tabular_game
from kv_shapley.estimator.sampler import SsvEstimate, estimate_ssv
from kv_shapley.estimator.stats import average_estimates, converged, mae, required_samples


def make_estimate(values, slice_set=(1,)) -> SsvEstimate:
    n = len(values)
    return SsvEstimate(
        n=n, labels=[f"p{i}" for i in range(n)], slice_set=list(slice_set), seed=0,
        values=list(values), per_slice_means=[[v] for v in values],
        per_slice_counts=[[1] for _ in values], total_samples=10, oracle_evaluations=20,
    )


class TestMae:
    def test_identical(self):
        a = make_estimate([0.1, 0.2, 0.3])
        assert mae(a, a) == 0.0

    def test_swapped(self):
        assert mae(make_estimate([0.0, 1.0]), make_estimate([1.0, 0.0])) == 1.0

    def test_mismatched_configuration(self):
        with pytest.raises(ConfigurationError):
            mae(make_estimate([0.0, 1.0]), make_estimate([0.0, 1.0], slice_set=(2,)))


class TestConverged:
    def test_strict_threshold(self):
        a = make_estimate([0.0, 0.0, 0.0, 0.0])
        b = make_estimate([0.25, 0.25, 0.25, 0.25])
        assert not converged(a, b, 4)

    def test_below_threshold(self):
        n = 256
        a = make_estimate([0.0] * n)
        b = make_estimate([3.8e-3] * n)
        assert converged(a, b, n)

    def test_far_apart(self):
        a = make_estimate([0.0] * 4)
        b = make_estimate([0.3] * 4)
        assert not converged(a, b, 4)


class TestAverage:
    def test_values_averaged_and_counts_summed(self):
        merged = average_estimates(make_estimate([0.0, 1.0]), make_estimate([1.0, 2.0]))
        assert merged.values == [0.5, 1.5]
        assert merged.per_slice_counts == [[2], [2]]
        assert merged.total_samples == 20
        assert merged.oracle_evaluations == 40


class TestRequiredSamples:
    def test_formula(self):
        # ceil(2 · 4 · 1 · ln(2 · 4 / 0.1) / 0.01)
        assert required_samples(0.1, 0.1, 4, 1.0) == 3506

    def test_halving_epsilon_quadruples(self):
        base = required_samples(0.2, 0.05, 3, 1.0, n=8)
        half = required_samples(0.1, 0.05, 3, 1.0, n=8)
        assert abs(half - 4 * base) <= 4

    def test_monotone(self):
        assert required_samples(0.1, 0.1, 5, 1.0) >= required_samples(0.1, 0.1, 4, 1.0)
        assert required_samples(0.1, 0.1, 4, 2.0) >= required_samples(0.1, 0.1, 4, 1.0)
        assert required_samples(0.1, 0.01, 4, 1.0) >= required_samples(0.1, 0.1, 4, 1.0)

    @pytest.mark.parametrize("args", [(0.0, 0.1, 4, 1.0), (0.1, 1.0, 4, 1.0),
                                      (0.1, 0.1, 0, 1.0), (0.1, 0.1, 4, 0.0)])
    def test_invalid(self, args):
        with pytest.raises(ConfigurationError):
            required_samples(*args)


class TestMaeStoppingRule:
    def _median_mae(self, samples: int, repeats: int) -> tuple:
        game = random_tabular_game(16, seed=99)
        H = SliceSet([4, 8, 12, 16], 16)
        gaps, hits = [], 0
        for r in range(repeats):
            a = estimate_ssv(game, H, samples=samples, seed=2 * r)
            b = estimate_ssv(game, H, samples=samples, seed=2 * r + 1)
            gaps.append(mae(a, b))
            hits += converged(a, b, 16)
        return float(np.median(gaps)), hits

    def test_mae_shrinks_with_samples(self):
        small, _ = self._median_mae(500, 5)
        large, hits = self._median_mae(5_000, 5)
        assert large < small
        assert hits == 5

    @pytest.mark.slow
    def test_mae_shrinks_twenty_repeats(self):
        small, _ = self._median_mae(500, 20)
        large, hits = self._median_mae(5_000, 20)
        assert large < small
        assert large < 1 / 16
        assert hits == 20
