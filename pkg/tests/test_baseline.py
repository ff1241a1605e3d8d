import numpy as np
import pytest

from oracles import baseline_H_oracle
from qrecur.baseline import estimate_baseline, naive_gamma
from qrecur.errors import NoEvents
from qrecur.records import Dataset, SubjectRecord


class TestHandExample:
    """Two subjects, small enough to work every jump by hand.

    a: C=1.0, events at 0.5 and 0.8; b: C=0.6, one event at 0.2; nu*=1.
    Jumps: 1/1 at 0.2 (only b's event is in view), 1/2 at 0.5 (a and b each
    contribute one event at risk), 1/2 at 0.8 (a alone, two events).
    """

    @pytest.fixture
    def est(self, two_subjects):
        return estimate_baseline(two_subjects)

    def test_jumps(self, est):
        np.testing.assert_array_equal(est.jump_times, [0.2, 0.5, 0.8])
        np.testing.assert_array_equal(est.jump_sizes, [1.0, 0.5, 0.5])

    def test_H_exact(self, est):
        assert est.H(1.0) == 0.0
        assert est.H(0.8) == 0.0
        assert est.H(0.5) == -0.5
        assert est.H(0.3) == -1.0
        assert est.H(0.1) == -2.0
        assert est.H(0.0) == -2.0

    def test_H_right_continuous(self, est):
        assert est.H(0.2) == -1.0
        assert est.H(0.2 - 1e-12) == -2.0

    def test_mu(self, est):
        assert est.mu(1.0) == 1.0
        assert est.mu(0.3) == pytest.approx(np.exp(-1.0))

    def test_array_evaluation(self, est):
        h = est.H(np.array([0.1, 0.3, 1.0]))
        np.testing.assert_array_equal(h, [-2.0, -1.0, 0.0])


class TestTies:
    def test_tied_events_merge_into_one_jump(self):
        recs = (
            SubjectRecord("a", 1.0, event_times=(0.5,)),
            SubjectRecord("b", 1.0, event_times=(0.5,)),
        )
        est = estimate_baseline(Dataset(recs, covariate_names=()))
        np.testing.assert_array_equal(est.jump_times, [0.5])
        # numerator 2 (tie count), denominator 2 (both pairs at risk)
        np.testing.assert_array_equal(est.jump_sizes, [1.0])


class TestAgainstOracle:
    def test_random_data_matches_double_loop(self, rng):
        recs = []
        for i in range(30):
            c = round(float(rng.uniform(0.5, 1.5)), 2)
            k = int(rng.poisson(2.0))
            ev = np.unique(np.round(rng.uniform(0.0, c, size=k), 2))
            ev = tuple(float(e) for e in ev if e > 0.0)
            recs.append(SubjectRecord(f"s{i}", c, event_times=ev))
        data = Dataset(tuple(recs), covariate_names=())
        est = estimate_baseline(data)

        queries = np.concatenate(
            [est.jump_times, rng.uniform(0.0, data.nu_star, size=25), [data.nu_star]]
        )
        for t in queries:
            expect = baseline_H_oracle(data.records, data.nu_star, float(t))
            assert est.H(float(t)) == pytest.approx(expect, abs=1e-12)

    def test_anchor_is_exact(self, small_sim):
        est = estimate_baseline(small_sim)
        assert est.H(small_sim.nu_star) == 0.0
        assert est.mu(small_sim.nu_star) == 1.0
        assert est.H_values[-1] == 0.0

    def test_mu_nondecreasing(self, small_sim):
        est = estimate_baseline(small_sim)
        ts = np.linspace(0.0, small_sim.nu_star, 200)
        mu = est.mu(ts)
        assert np.all(np.diff(mu) >= 0.0)
        assert np.all(mu > 0.0)
        assert np.all(mu <= 1.0)


class TestNoEvents:
    def test_raises(self):
        recs = (SubjectRecord("a", 1.0), SubjectRecord("b", 2.0))
        with pytest.raises(NoEvents):
            estimate_baseline(Dataset(recs, covariate_names=()))


class TestNaiveGamma:
    def test_with_events(self, two_subjects):
        est = estimate_baseline(two_subjects)
        a, b = two_subjects.records
        # mu(1.0) = 1, mu(0.6) = exp(-1/2)
        assert naive_gamma(a, est) == pytest.approx(2.0)
        assert naive_gamma(a, est, adjusted=False) == pytest.approx(2.0)
        assert naive_gamma(b, est) == pytest.approx(np.exp(0.5))

    def test_zero_events(self, two_subjects):
        est = estimate_baseline(two_subjects)
        empty = SubjectRecord("c", 1.0)
        assert naive_gamma(empty, est) == pytest.approx(1.0)
        assert naive_gamma(empty, est, adjusted=False) == 0.0
