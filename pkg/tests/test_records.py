import numpy as np
import pytest

from qrecur.errors import ValidationError
from qrecur.records import (
    CoefficientPath,
    Dataset,
    SubjectRecord,
    TauGrid,
    counting_process_value,
    standardize_dataset,
)


class TestSubjectRecord:
    def test_valid_record(self):
        r = SubjectRecord("s1", 2.0, event_times=(0.5, 1.0, 2.0), covariates=(1.5,))
        assert r.m == 3
        assert r.event_times == (0.5, 1.0, 2.0)

    def test_event_at_censoring_time_allowed(self):
        r = SubjectRecord("s1", 1.0, event_times=(1.0,))
        assert r.m == 1

    @pytest.mark.parametrize("bad_c", [0.0, -1.0, np.inf, np.nan])
    def test_bad_censoring_time(self, bad_c):
        with pytest.raises(ValidationError):
            SubjectRecord("s1", bad_c)

    def test_event_after_censoring(self):
        with pytest.raises(ValidationError):
            SubjectRecord("s1", 1.0, event_times=(1.5,))

    def test_event_at_zero(self):
        with pytest.raises(ValidationError):
            SubjectRecord("s1", 1.0, event_times=(0.0,))

    def test_events_not_increasing(self):
        with pytest.raises(ValidationError):
            SubjectRecord("s1", 1.0, event_times=(0.5, 0.5))
        with pytest.raises(ValidationError):
            SubjectRecord("s1", 1.0, event_times=(0.5, 0.3))

    def test_nonfinite_covariate(self):
        with pytest.raises(ValidationError):
            SubjectRecord("s1", 1.0, covariates=(np.nan,))


class TestCountingProcess:
    def test_right_continuous(self):
        r = SubjectRecord("s1", 2.0, event_times=(0.5, 1.0))
        assert counting_process_value(r, 0.4999) == 0
        assert counting_process_value(r, 0.5) == 1
        assert counting_process_value(r, 0.9999) == 1
        assert counting_process_value(r, 1.0) == 2

    def test_capped_at_censoring(self):
        # beyond C the path is flat at m; the window never extends past C
        r = SubjectRecord("s1", 1.0, event_times=(0.2, 0.9))
        assert counting_process_value(r, 1.0) == 2
        assert counting_process_value(r, 5.0) == 2

    def test_negative_t(self):
        r = SubjectRecord("s1", 1.0)
        with pytest.raises(ValidationError):
            counting_process_value(r, -0.1)

    def test_zero(self):
        r = SubjectRecord("s1", 1.0, event_times=(0.2,))
        assert counting_process_value(r, 0.0) == 0


class TestDataset:
    def test_basic(self, two_subjects):
        assert two_subjects.n == 2
        assert two_subjects.p == 2
        np.testing.assert_array_equal(two_subjects.event_counts(), [2, 1])
        np.testing.assert_array_equal(two_subjects.censoring_times(), [1.0, 0.6])

    def test_design_matrix(self, two_subjects):
        x = two_subjects.design_matrix()
        np.testing.assert_array_equal(x, [[1.0, 0.2], [1.0, 0.7]])

    def test_nu_star_default(self):
        recs = (SubjectRecord("a", 1.0), SubjectRecord("b", 3.0))
        d = Dataset(recs, covariate_names=())
        assert d.nu_star == 3.0

    def test_nu_star_below_max_censoring(self):
        recs = (SubjectRecord("a", 1.0), SubjectRecord("b", 3.0))
        with pytest.raises(ValidationError):
            Dataset(recs, covariate_names=(), nu_star=2.0)

    def test_empty(self):
        with pytest.raises(ValidationError):
            Dataset((), covariate_names=())

    def test_covariate_length_mismatch(self):
        recs = (SubjectRecord("a", 1.0, covariates=(1.0,)),)
        with pytest.raises(ValidationError):
            Dataset(recs, covariate_names=("x1", "x2"))


class TestStandardize:
    def test_continuous_only_by_default(self):
        # x1 takes 4 values (continuous), x2 is binary and must pass through
        recs = tuple(
            SubjectRecord(f"s{i}", 1.0, covariates=(float(i), float(i % 2)))
            for i in range(4)
        )
        data = Dataset(recs, covariate_names=("x1", "x2"))
        out, info = standardize_dataset(data)
        assert info.columns == ("x1",)
        x = np.array([r.covariates for r in out.records])
        assert abs(np.mean(x[:, 0])) < 1e-12
        assert abs(np.std(x[:, 0]) - 1.0) < 1e-12
        np.testing.assert_array_equal(x[:, 1], [0.0, 1.0, 0.0, 1.0])

    def test_population_sd(self):
        recs = tuple(
            SubjectRecord(f"s{i}", 1.0, covariates=(v,))
            for i, v in enumerate((0.0, 1.0, 2.0, 3.0))
        )
        data = Dataset(recs, covariate_names=("x1",))
        _, info = standardize_dataset(data, columns=("x1",))
        assert info.means == (1.5,)
        assert info.scales == (float(np.std([0.0, 1.0, 2.0, 3.0])),)

    def test_constant_column_scale_one(self):
        recs = tuple(SubjectRecord(f"s{i}", 1.0, covariates=(5.0,)) for i in range(3))
        data = Dataset(recs, covariate_names=("x1",))
        out, info = standardize_dataset(data, columns=("x1",))
        assert info.scales == (1.0,)
        assert out.records[0].covariates == (0.0,)

    def test_unknown_column(self, two_subjects):
        with pytest.raises(ValidationError):
            standardize_dataset(two_subjects, columns=("nope",))


class TestTauGrid:
    def test_from_range(self):
        g = TauGrid.from_range(0.1, 0.9, 0.2)
        np.testing.assert_allclose(g.array, [0.1, 0.3, 0.5, 0.7, 0.9])
        assert len(g) == 5

    def test_from_range_bad_step(self):
        with pytest.raises(ValidationError):
            TauGrid.from_range(0.1, 0.9, 0.25)

    def test_knots_outside_unit_interval(self):
        with pytest.raises(ValidationError):
            TauGrid((0.5, 1.0))
        with pytest.raises(ValidationError):
            TauGrid((0.0, 0.5))

    def test_not_increasing(self):
        with pytest.raises(ValidationError):
            TauGrid((0.5, 0.5))

    def test_empty(self):
        with pytest.raises(ValidationError):
            TauGrid(())

    def test_single_knot(self):
        g = TauGrid((0.5,))
        assert g.mesh == 0.0

    def test_mesh(self):
        assert TauGrid((0.1, 0.2, 0.6)).mesh == pytest.approx(0.4)


class TestCoefficientPath:
    def test_knot_values_exact(self):
        g = TauGrid((0.25, 0.5, 0.75))
        th = np.array([[1.0, 0.0], [2.0, -1.0], [4.0, 3.0]])
        path = CoefficientPath(g, th)
        np.testing.assert_array_equal(path.evaluate(0.5), [2.0, -1.0])

    def test_linear_interpolation(self):
        g = TauGrid((0.2, 0.6))
        path = CoefficientPath(g, np.array([[0.0], [4.0]]))
        assert path.evaluate(0.4)[0] == pytest.approx(2.0)

    def test_constant_extension(self):
        g = TauGrid((0.2, 0.6))
        path = CoefficientPath(g, np.array([[1.0], [4.0]]))
        assert path.evaluate(0.05)[0] == 1.0
        assert path.evaluate(0.95)[0] == 4.0

    def test_vector_tau(self):
        g = TauGrid((0.2, 0.6))
        path = CoefficientPath(g, np.array([[0.0], [4.0]]))
        out = path.evaluate([0.2, 0.4, 0.6])
        assert out.shape == (3, 1)
        np.testing.assert_allclose(out[:, 0], [0.0, 2.0, 4.0])

    def test_one_dim_theta_promoted(self):
        path = CoefficientPath(TauGrid((0.3, 0.7)), np.array([1.0, 2.0]))
        assert path.p == 1

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            CoefficientPath(TauGrid((0.3, 0.7)), np.zeros((3, 2)))

    def test_nonfinite(self):
        with pytest.raises(ValidationError):
            CoefficientPath(TauGrid((0.3, 0.7)), np.array([[1.0], [np.nan]]))

    def test_readonly(self):
        path = CoefficientPath(TauGrid((0.3, 0.7)), np.zeros((2, 1)))
        with pytest.raises(ValueError):
            path.theta[0, 0] = 1.0
