"""Multiple-testing procedures: manual examples and structural properties."""

import numpy as np
import pytest

from confcontam.errors import ConfigurationError
from confcontam.mht import PValueVector, bh, storey_bh, storey_fdr_estimate


def _pvec(values, ids=None):
    return PValueVector.make(values, ids)


class TestBh:
    def test_manual_example(self):
        # thresholds 0.0167, 0.0333, 0.05: reject the two smallest
        out = bh(_pvec([0.01, 0.02, 0.5], ["a", "b", "c"]), 0.05)
        assert out.rejected == {"a", "b"}
        assert out.kappa == 2
        assert out.k0_hat is None

    def test_all_ones_rejects_nothing(self):
        out = bh(_pvec([1.0, 1.0, 1.0]), 0.1)
        assert out.rejected == frozenset() and out.kappa == 0

    def test_all_zeros_rejects_everything(self):
        out = bh(_pvec([0.0, 0.0, 0.0, 0.0]), 0.05)
        assert len(out.rejected) == 4 and out.kappa == 4

    def test_rejection_count_matches_kappa(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            values = np.round(rng.uniform(size=rng.integers(1, 12)), 2)
            out = bh(_pvec(values), 0.2)
            assert len(out.rejected) == out.kappa

    def test_monotone_in_pvalues(self):
        # decreasing any p-value never decreases kappa
        rng = np.random.default_rng(1)
        for _ in range(100):
            values = rng.uniform(size=8)
            out = bh(_pvec(values), 0.1)
            j = rng.integers(0, 8)
            lowered = values.copy()
            lowered[j] *= rng.uniform()
            assert bh(_pvec(lowered), 0.1).kappa >= out.kappa

    def test_threshold_set_property(self):
        # anything at or below the largest rejected p-value is rejected too
        rng = np.random.default_rng(2)
        for _ in range(50):
            pvec = _pvec(rng.uniform(size=10))
            out = bh(pvec, 0.3)
            rejected_vals = [
                v for v, a in zip(pvec.values, pvec.agent_ids) if a in out.rejected
            ]
            if rejected_vals:
                cut = max(rejected_vals)
                for v, a in zip(pvec.values, pvec.agent_ids):
                    if v <= cut:
                        assert a in out.rejected

    def test_empty_vector(self):
        with pytest.raises(ConfigurationError):
            bh(PValueVector(values=(), agent_ids=()), 0.05)


class TestStoreyBh:
    def test_manual_example(self):
        # gamma=0.5: two p-values above, K0_hat = 2/(1-0.5) = 4,
        # thresholds j*0.0125: only 0.01 rejected
        out = storey_bh(_pvec([0.01, 0.2, 0.8, 0.9], list("abcd")), 0.05, 0.5)
        assert out.k0_hat == pytest.approx(4.0)
        assert out.rejected == {"a"}

    def test_second_manual_example(self):
        out = storey_bh(_pvec([0.001, 0.9], ["one", "two"]), 0.05, 0.5)
        assert out.k0_hat == pytest.approx(2.0)
        assert out.rejected == {"one"}

    def test_all_above_gamma_at_least_as_strict_as_bh(self):
        values = [0.6, 0.7, 0.8, 0.95]
        out = storey_bh(_pvec(values), 0.05, 0.5)
        assert out.k0_hat == pytest.approx(len(values) / 0.5)
        assert len(out.rejected) <= len(bh(_pvec(values), 0.05).rejected)

    def test_k0_zero_rejects_all(self):
        out = storey_bh(_pvec([0.01, 0.02, 0.3]), 0.05, 0.5)
        assert out.k0_hat == 0.0
        assert len(out.rejected) == 3 and out.kappa == 3

    def test_k0_kept_real_valued(self):
        out = storey_bh(_pvec([0.9, 0.1, 0.2]), 0.05, 0.6)
        assert out.k0_hat == pytest.approx(1 / 0.4)

    def test_empty_vector(self):
        with pytest.raises(ConfigurationError):
            storey_bh(PValueVector(values=(), agent_ids=()), 0.05, 0.5)


class TestStoreyFdrEstimate:
    def test_hand_derived_value(self):
        # min(1, 0.05*2 / (0.5*2)) = 0.1, exactly
        est = storey_fdr_estimate(_pvec([0.01, 0.04, 0.6, 0.7]), 0.05, 0.5)
        assert est == 0.1

    def test_empty_rejection_region(self):
        assert storey_fdr_estimate(_pvec([0.5, 0.6]), 0.05, 0.5) == 1.0

    def test_zero_numerator(self):
        assert storey_fdr_estimate(_pvec([0.01, 0.2]), 0.05, 0.5) == 0.0

    def test_both_degenerate_prefers_conservative_one(self):
        # nothing at or below delta AND nothing above gamma
        assert storey_fdr_estimate(_pvec([0.2, 0.3]), 0.1, 0.5) == 1.0

    def test_monotone_in_delta_between_jumps(self):
        # The raw estimate is linear in delta while the rejection count is
        # constant; it can only drop when a new p-value enters the region.
        rng = np.random.default_rng(3)
        values = rng.uniform(size=20)
        pvec = _pvec(values)
        for d1, d2 in zip(np.linspace(0.0, 1.0, 41), np.linspace(0.0, 1.0, 41)[1:]):
            if np.sum(values <= d1) == np.sum(values <= d2) and np.sum(values <= d1) > 0:
                assert storey_fdr_estimate(pvec, d2, 0.5) >= storey_fdr_estimate(
                    pvec, d1, 0.5
                ) - 1e-12

    def test_clamped_to_one(self):
        assert storey_fdr_estimate(_pvec([0.005, 0.9, 0.95, 0.99]), 0.9, 0.5) == 1.0
