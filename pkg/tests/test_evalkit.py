import math

import numpy as np
import pytest

from conflictlab import evalkit
from conflictlab.evalkit import VerificationRecord


def _rec(j_hat, j_true, label, trace=None):
    return VerificationRecord(
        cid="x", searcher="t", scenario="direct", seed=0,
        j_hat=j_hat, j_true=j_true, label=label,
        phi_trace=trace if trace is not None else [0.0] * 20,
        runtime_s=0.0,
    )


class TestTprAtK:
    def test_all_positive(self):
        recs = [_rec(10 - i, 5.0, True) for i in range(10)]
        assert evalkit.tpr_at_k(recs, 10) == 1.0

    def test_none_positive(self):
        recs = [_rec(10 - i, 0.0, False) for i in range(10)]
        assert evalkit.tpr_at_k(recs, 10) == 0.0

    def test_hand_built_counting(self):
        labels = [True, False, True, True, False]
        recs = [_rec(5 - i, 0.0, l) for i, l in enumerate(labels)]
        assert evalkit.tpr_at_k(recs, 5) == pytest.approx(0.6)

    def test_requires_enough_records(self):
        with pytest.raises(ValueError):
            evalkit.tpr_at_k([_rec(1, 0, False)], 10)

    def test_invariant_to_permutations_within_top_and_rest(self):
        rng = np.random.default_rng(0)
        labels = [True] * 4 + [False] * 6
        recs = [_rec(float(10 - i), 0.0, l) for i, l in enumerate(labels)]
        base = evalkit.tpr_at_k(recs, 5)
        top, rest = recs[:5], recs[5:]
        for _ in range(5):
            rng.shuffle(top)
            rng.shuffle(rest)
            assert evalkit.tpr_at_k(top + rest, 5) == base


class TestSpearman:
    def test_identical_orderings(self):
        recs = [_rec(float(i), float(i), True) for i in range(6)]
        assert evalkit.spearman_rho(recs) == pytest.approx(1.0)

    def test_reversed_orderings(self):
        recs = [_rec(float(i), float(-i), True) for i in range(6)]
        assert evalkit.spearman_rho(recs) == pytest.approx(-1.0)

    def test_hand_rank_correlation(self):
        # pairs (1,2), (2,1), (3,3): rho = 1 - 6*(1+1+0)/(3*8) = 0.5
        recs = [_rec(1.0, 2.0, True), _rec(2.0, 1.0, True), _rec(3.0, 3.0, True)]
        assert evalkit.spearman_rho(recs) == pytest.approx(0.5)

    def test_constant_series_flagged_null(self):
        recs = [_rec(1.0, float(i), True) for i in range(5)]
        assert evalkit.spearman_rho(recs) is None

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=12)
        y = rng.normal(size=12)
        recs1 = [_rec(float(a), float(b), True) for a, b in zip(x, y)]
        recs2 = [_rec(float(math.exp(a)), float(b**3), True) for a, b in zip(x, y)]
        assert evalkit.spearman_rho(recs1) == pytest.approx(
            evalkit.spearman_rho(recs2)
        )

    def test_needs_three(self):
        with pytest.raises(ValueError):
            evalkit.spearman_rho([_rec(1, 1, True), _rec(2, 2, True)])


class TestDiversity:
    def test_identical_severities_zero_entropy(self):
        trace = [1.0] * 10 + [0.0] * 10
        recs = [_rec(1.0, 1.0, True, trace) for _ in range(8)]
        assert evalkit.diversity_histogram(recs)["entropy"] == 0.0

    def test_uniform_over_bins_maximal(self):
        recs = []
        for b in range(10):
            frac = (b + 0.5) / 10.0
            n_on = int(round(frac * 20))
            trace = [1.0] * n_on + [0.0] * (20 - n_on)
            recs.append(_rec(1.0, 1.0, True, trace))
        out = evalkit.diversity_histogram(recs, bins=10)
        assert out["entropy"] == pytest.approx(math.log(10))

    def test_hand_built_entropy(self):
        # 4 records in two bins with counts [3, 1]:
        # H = -(3/4 ln 3/4 + 1/4 ln 1/4)
        traces = [[1.0] * 2 + [0.0] * 18] * 3 + [[1.0] * 18 + [0.0] * 2]
        recs = [_rec(1.0, 1.0, True, t) for t in traces]
        expected = -(0.75 * math.log(0.75) + 0.25 * math.log(0.25))
        assert evalkit.diversity_histogram(recs)["entropy"] == pytest.approx(expected)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            evalkit.diversity_histogram([])


class TestAblationConfig:
    def test_toggle_semantics(self):
        from conflictlab.guidance import GuidanceConfig

        base = GuidanceConfig()
        assert evalkit.ablation_config("no_Udyn", base).udyn_scale == 0.0
        assert evalkit.ablation_config("no_Upi", base).upi_scale == 0.0
        both = evalkit.ablation_config("no_both", base)
        assert both.udyn_scale == 0.0 and both.upi_scale == 0.0
        assert evalkit.ablation_config("no_guidance", base).eta == 0.0
        full = evalkit.ablation_config("full", base)
        assert full.eta == base.eta and full.udyn_scale == 1.0

    def test_unknown_variant_rejected(self):
        from conflictlab.guidance import GuidanceConfig

        with pytest.raises(ValueError):
            evalkit.ablation_config("no_everything", GuidanceConfig())


class TestAggregate:
    def test_mean_std_convention(self):
        rows = [{"tpr@10": 0.8, "spearman": 0.5}, {"tpr@10": 1.0, "spearman": 0.3}]
        out = evalkit.aggregate_rows(rows)
        assert out["tpr@10"]["mean"] == pytest.approx(0.9)
        assert out["tpr@10"]["std"] == pytest.approx(np.std([0.8, 1.0], ddof=1))

    def test_null_spearman_skipped(self):
        rows = [{"spearman": None}, {"spearman": 0.4}]
        out = evalkit.aggregate_rows(rows)
        assert out["spearman"]["n"] == 1
