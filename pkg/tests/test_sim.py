import json

import numpy as np
import pytest
import scipy.integrate
import scipy.stats

from qrecur.density import poisson_window_pmf
from qrecur.errors import TooManyFailures, ValidationError
from qrecur.estimator import FitConfig
from qrecur.records import TauGrid
from qrecur.sim import (
    DGPSpec,
    MonteCarloReport,
    _poisson_times,
    generate_dataset,
    generate_subject,
    run_monte_carlo,
    true_coefficients,
)

# standard normal and t_3 quantiles used as frozen reference values
_Z_975 = 1.959963984540054
_T3_90 = 1.6377443536962102


@pytest.fixture(scope="module")
def big_hom():
    return generate_dataset(DGPSpec(n=2000, seed=31))


@pytest.fixture(scope="module")
def big_het():
    return generate_dataset(DGPSpec(kind="heteroscedastic-normal", n=2000, seed=31))


def _mean_events_oracle(spec):
    """E[m] = E[C] * E_x[exp(x'b + scale(x)^2 / 2)] by direct integration."""
    b = np.asarray(spec.b)
    lo, hi = spec.censoring
    mean_c = 0.5 * (lo + hi)

    def gamma_mean(x1, x2):
        x = np.array([1.0, x1, x2])
        if spec.kind == "heteroscedastic-normal":
            s = float(x @ np.asarray(spec.d))
        else:
            s = spec.d
        return np.exp(float(x @ b) + 0.5 * s * s)

    total = 0.0
    for x2 in (0.0, 1.0):
        val, _ = scipy.integrate.quad(lambda u: gamma_mean(u, x2), 0.0, 1.0)
        total += 0.5 * val
    return mean_c * total


class TestDGPSpecValidation:
    def test_defaults(self):
        spec = DGPSpec()
        assert spec.kind == "homogeneous-normal"
        assert spec.d == 0.5
        assert spec.b == pytest.approx((np.log(3.0) + 1.0, 1.0, 1.0))
        assert spec.censoring == (2.0 / 3.0, 1.0)

    def test_heteroscedastic_default_d(self):
        spec = DGPSpec(kind="heteroscedastic-normal")
        assert spec.d == (0.1, 0.1, 0.1)

    def test_unknown_kind(self):
        with pytest.raises(ValidationError):
            DGPSpec(kind="exponential")

    @pytest.mark.parametrize("b", [(1.0, 2.0), (1.0, 2.0, np.nan), (1.0,) * 4])
    def test_bad_b(self, b):
        with pytest.raises(ValidationError):
            DGPSpec(b=b)

    def test_bad_n(self):
        with pytest.raises(ValidationError):
            DGPSpec(n=0)

    @pytest.mark.parametrize("censoring", [(0.0, 1.0), (1.0, 0.5), (-1.0, 1.0)])
    def test_bad_censoring(self, censoring):
        with pytest.raises(ValidationError):
            DGPSpec(censoring=censoring)

    def test_heteroscedastic_scale_must_stay_positive(self):
        # infimum of x'd over the covariate range is d0 + min(0,d1) + min(0,d2)
        DGPSpec(kind="heteroscedastic-normal", d=(0.3, -0.2, 0.1))
        with pytest.raises(ValidationError):
            DGPSpec(kind="heteroscedastic-normal", d=(0.1, -0.2, 0.1))

    def test_negative_scalar_d(self):
        with pytest.raises(ValidationError):
            DGPSpec(d=-0.1)

    def test_custom_needs_both_callables(self):
        with pytest.raises(ValidationError):
            DGPSpec(kind="custom", error_sampler=lambda rng: 0.0)
        with pytest.raises(ValidationError):
            DGPSpec(kind="custom", error_quantile=lambda t: 0.0)
        DGPSpec(
            kind="custom",
            error_sampler=lambda rng: float(rng.uniform(-1, 1)),
            error_quantile=lambda t: 2.0 * t - 1.0,
        )

    def test_named_kinds_reject_callables(self):
        with pytest.raises(ValidationError):
            DGPSpec(error_quantile=lambda t: 0.0)


class TestPoissonTimes:
    def test_structure(self, rng):
        times = _poisson_times(5.0, 0.8, rng)
        arr = np.array(times)
        assert np.all(arr > 0.0)
        assert np.all(arr <= 0.8)
        assert np.all(np.diff(arr) > 0.0)

    def test_bad_gamma(self, rng):
        for bad in (0.0, -1.0, np.inf, np.nan):
            with pytest.raises(ValidationError):
                _poisson_times(bad, 1.0, rng)

    def test_count_law_matches_window_pmf(self):
        # 20000 window counts against the pmf the estimator assumes;
        # chi-square over 0..tail with pooled upper tail
        gamma, c, draws = 1.5, 0.8, 20000
        rng = np.random.default_rng(99)
        counts = np.array([len(_poisson_times(gamma, c, rng)) for _ in range(draws)])
        kmax = 6
        observed = np.bincount(np.minimum(counts, kmax), minlength=kmax + 1)
        probs = poisson_window_pmf(np.arange(kmax), gamma, c)
        probs = np.append(probs, 1.0 - probs.sum())
        assert np.all(draws * probs > 5.0)
        stat = float(np.sum((observed - draws * probs) ** 2 / (draws * probs)))
        pval = float(scipy.stats.chi2.sf(stat, df=kmax))
        assert pval > 0.001


class TestGenerateSubject:
    def test_fields(self, rng):
        rec = generate_subject(DGPSpec(seed=0), rng, subject_id="abc")
        assert rec.subject_id == "abc"
        x1, x2 = rec.covariates
        assert 0.0 <= x1 < 1.0
        assert x2 in (0.0, 1.0)
        assert 2.0 / 3.0 <= rec.censoring_time <= 1.0

    def test_shared_draw_order_across_normal_kinds(self):
        # both kinds consume one uniform, one integer, one normal, one
        # uniform before the gaps, so covariates and censoring line up
        a = generate_subject(DGPSpec(), np.random.default_rng(3))
        b = generate_subject(
            DGPSpec(kind="heteroscedastic-normal"), np.random.default_rng(3)
        )
        assert a.covariates == b.covariates
        assert a.censoring_time == b.censoring_time

    def test_degenerate_censoring_interval(self, rng):
        rec = generate_subject(DGPSpec(censoring=(0.75, 0.75)), rng)
        assert rec.censoring_time == 0.75


class TestGenerateDataset:
    def test_layout(self, big_hom):
        assert big_hom.n == 2000
        assert big_hom.covariate_names == ("x1", "x2")
        assert big_hom.nu_star == 1.0
        assert big_hom.records[7].subject_id == "s00007"

    def test_deterministic(self):
        spec = DGPSpec(n=25, seed=12)
        assert generate_dataset(spec) == generate_dataset(spec)

    def test_explicit_rng_equals_seed_path(self):
        spec = DGPSpec(n=25, seed=12)
        rng = np.random.default_rng(np.random.SeedSequence(12))
        assert generate_dataset(spec, rng=rng) == generate_dataset(spec)

    def test_covariates_independent_of_censoring(self, big_hom):
        x = np.array([r.covariates for r in big_hom.records])
        c = big_hom.censoring_times()
        assert abs(np.corrcoef(x[:, 0], c)[0, 1]) < 0.05
        assert abs(np.corrcoef(x[:, 1], c)[0, 1]) < 0.05
        assert np.mean(x[:, 0]) == pytest.approx(0.5, abs=0.03)
        assert np.mean(x[:, 1]) == pytest.approx(0.5, abs=0.03)

    def test_forced_rate_mean_count(self):
        # gamma pinned at 2 and C pinned at 1: the count is Poisson(2)
        spec = DGPSpec(
            b=(np.log(2.0), 0.0, 0.0), d=0.0, censoring=(1.0, 1.0),
            n=30000, seed=5,
        )
        data = generate_dataset(spec)
        assert float(np.mean(data.event_counts())) == pytest.approx(2.0, abs=0.03)

    def test_homogeneous_mean_events(self, big_hom):
        expect = _mean_events_oracle(DGPSpec())
        assert expect == pytest.approx(24.6, abs=0.05)
        assert float(np.mean(big_hom.event_counts())) == pytest.approx(
            expect, abs=1.5
        )

    def test_heteroscedastic_mean_events(self, big_het):
        expect = _mean_events_oracle(DGPSpec(kind="heteroscedastic-normal"))
        assert float(np.mean(big_het.event_counts())) == pytest.approx(
            expect, abs=1.5
        )


class TestTrueCoefficients:
    def test_median_is_b(self):
        spec = DGPSpec()
        np.testing.assert_array_equal(true_coefficients(spec, 0.5), spec.b)

    def test_normal_upper_tail(self):
        spec = DGPSpec()
        got = true_coefficients(spec, 0.975)
        np.testing.assert_allclose(
            got, [np.log(3.0) + 1.0 + 0.5 * _Z_975, 1.0, 1.0], atol=1e-9
        )

    def test_t3_tail(self):
        spec = DGPSpec(kind="homogeneous-t3")
        got = true_coefficients(spec, 0.9)
        np.testing.assert_allclose(
            got, [np.log(3.0) + 1.0 + 0.5 * _T3_90, 1.0, 1.0], atol=1e-9
        )

    def test_heteroscedastic_moves_every_coefficient(self):
        spec = DGPSpec(kind="heteroscedastic-normal")
        np.testing.assert_array_equal(true_coefficients(spec, 0.5), spec.b)
        got = true_coefficients(spec, 0.975)
        expect = np.asarray(spec.b) + 0.1 * _Z_975
        np.testing.assert_allclose(got, expect, atol=1e-9)

    def test_custom_quantile(self):
        spec = DGPSpec(
            kind="custom",
            d=1.0,
            error_sampler=lambda rng: float(rng.uniform(0.0, 2.0)),
            error_quantile=lambda t: 2.0 * t,
        )
        got = true_coefficients(spec, 0.25)
        expect = np.asarray(spec.b) + np.array([0.5, 0.0, 0.0])
        np.testing.assert_allclose(got, expect)

    def test_tau_range(self):
        with pytest.raises(ValidationError):
            true_coefficients(DGPSpec(), 0.0)
        with pytest.raises(ValidationError):
            true_coefficients(DGPSpec(), 1.0)


def _small_spec(**kwargs):
    return DGPSpec(n=60, seed=9, **kwargs)


def _small_config():
    return FitConfig(grid=TauGrid.from_range(0.2, 0.8, 0.15))


class TestMonteCarlo:
    def test_single_replication(self):
        report = run_monte_carlo(
            _small_spec(), _small_config(), R=1, tau_report=(0.35, 0.5)
        )
        assert report.R == 1
        assert report.n_failed == 0
        assert report.taus == (0.35, 0.5)
        assert report.coef_names == ("intercept", "x1", "x2")
        assert np.all(np.isfinite(report.bias))
        assert np.all(np.isfinite(report.naive_bias))
        assert np.all(np.isnan(report.sd))
        assert np.all(np.isnan(report.mean_se))
        assert np.all(np.isnan(report.coverage))
        assert report.mean_events > 0.0

    def test_deterministic(self):
        a = run_monte_carlo(_small_spec(), _small_config(), R=2)
        b = run_monte_carlo(_small_spec(), _small_config(), R=2)
        np.testing.assert_array_equal(a.bias, b.bias)
        np.testing.assert_array_equal(a.sd, b.sd)

    def test_job_count_does_not_change_results(self):
        seq = run_monte_carlo(_small_spec(), _small_config(), R=3)
        par = run_monte_carlo(_small_spec(), _small_config(), R=3, jobs=2)
        np.testing.assert_array_equal(seq.bias, par.bias)
        np.testing.assert_array_equal(seq.naive_bias, par.naive_bias)
        np.testing.assert_array_equal(seq.sd, par.sd)
        assert seq.mean_events == par.mean_events

    def test_with_bootstrap(self):
        report = run_monte_carlo(
            _small_spec(), _small_config(), R=2, B=4, tau_report=(0.5,)
        )
        assert report.B == 4
        assert np.all(np.isfinite(report.mean_se))
        assert np.all(report.mean_se > 0.0)
        assert np.all((report.coverage >= 0.0) & (report.coverage <= 1.0))

    def test_all_failures_abort(self):
        # a rate of e^-20 produces zero events in every dataset, so the
        # baseline step fails in each replication
        spec = _small_spec(b=(-20.0, 0.0, 0.0), d=0.0)
        with pytest.raises(TooManyFailures, match="NoEvents"):
            run_monte_carlo(spec, _small_config(), R=2)

    def test_validation(self):
        with pytest.raises(ValidationError):
            run_monte_carlo(_small_spec(), _small_config(), R=0)
        with pytest.raises(ValidationError):
            run_monte_carlo(_small_spec(), _small_config(), R=1, jobs=0)
        with pytest.raises(ValidationError):
            run_monte_carlo(_small_spec(), _small_config(), R=1, tau_report=())


class TestMonteCarloReport:
    def _report(self, **overrides):
        shape = (2, 3)
        fields = dict(
            taus=(0.25, 0.5),
            coef_names=("intercept", "x1", "x2"),
            true_values=np.ones(shape),
            bias=np.zeros(shape),
            sd=np.full(shape, 0.1),
            mean_se=np.full(shape, np.nan),
            coverage=np.full(shape, np.nan),
            naive_bias=np.zeros(shape),
            R=4,
            n_failed=0,
            mean_events=10.0,
            B=0,
            alpha=0.05,
            seed=0,
        )
        fields.update(overrides)
        return MonteCarloReport(**fields)

    def test_nan_coverage_tolerated(self):
        report = self._report()
        assert np.all(np.isnan(report.coverage))

    def test_bad_coverage(self):
        with pytest.raises(ValidationError):
            self._report(coverage=np.full((2, 3), 1.5))

    def test_bad_shape(self):
        with pytest.raises(ValidationError):
            self._report(bias=np.zeros((3, 3)))

    def test_rows_map_nan_to_none(self):
        rows = self._report().rows()
        assert len(rows) == 6
        assert rows[0]["mean_se"] is None
        assert rows[0]["sd"] == 0.1

    def test_csv_round_trip(self, tmp_path):
        report = self._report()
        out = tmp_path / "report.csv"
        report.write_csv(out)
        lines = out.read_text(encoding="utf-8").splitlines()
        assert lines[0] == "tau,coef_name,true_value,bias,sd,mean_se,coverage,naive_bias"
        assert len(lines) == 7
        first = lines[1].split(",")
        assert first[0] == "0.25"
        assert first[1] == "intercept"
        assert first[5] == ""  # NaN mean_se serializes as empty

    def test_json_round_trip(self, tmp_path):
        report = self._report()
        out = tmp_path / "report.json"
        report.write_json(out)
        text = out.read_text(encoding="utf-8")
        assert text.endswith("\n")
        doc = json.loads(text)
        assert doc["replications"] == 4
        assert doc["rows"] == report.rows()
        assert doc["mean_events"] == 10.0
