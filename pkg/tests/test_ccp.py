import numpy as np
import pytest

from klscore.ccp import (
    BsplineCcp,
    CellMeanCcp,
    Dataset,
    default_basis_dim,
    fit_bspline,
    fit_cell_mean,
)
from klscore.errors import (
    ConfigError,
    ExtrapolationError,
    OverparameterizationError,
    UnseenCovariateError,
)
from klscore.events import OutcomeSpace

SPACE2 = OutcomeSpace(["y1", "y2"])
SPACE4 = OutcomeSpace(["a", "b", "c", "d"])


class TestDataset:
    def test_validation(self):
        with pytest.raises(ConfigError):
            Dataset([], np.zeros((0, 1)), SPACE2)
        with pytest.raises(ConfigError):
            Dataset([0, 5], np.zeros((2, 1)), SPACE2)
        with pytest.raises(ConfigError):
            Dataset([0, 1], np.array([[np.nan], [0.0]]), SPACE2)

    def test_csv_roundtrip(self, tmp_path):
        data = Dataset([0, 1, 1], np.array([[0.25, 1.5], [0.5, -0.125], [0.75, 3.0]]), SPACE2)
        path = tmp_path / "d.csv"
        data.to_csv(path)
        back = Dataset.read_csv(path, SPACE2)
        np.testing.assert_array_equal(back.outcomes, data.outcomes)
        np.testing.assert_array_equal(back.covariates, data.covariates)


class TestCellMean:
    def test_hand_count(self):
        data = Dataset([0, 0, 0, 1], np.zeros((4, 1)), SPACE2)
        est = fit_cell_mean(data, clip=0.0)
        assert est.eval("y1", [0.0]) == pytest.approx(0.75)

    def test_single_outcome_cell_clip(self):
        data = Dataset([0, 0, 0], np.zeros((3, 1)), SPACE2)
        est = fit_cell_mean(data, clip=1e-3)
        m = 2
        assert est.eval("y1", [0.0]) == pytest.approx(1.0 - (m - 1) * 1e-3)
        assert est.eval("y2", [0.0]) == pytest.approx(1e-3)

    def test_row_order_invariant(self):
        rng = np.random.default_rng(0)
        y = rng.integers(0, 2, size=40)
        x = rng.integers(0, 3, size=(40, 1)).astype(float)
        a = fit_cell_mean(Dataset(y, x, SPACE2))
        perm = rng.permutation(40)
        b = fit_cell_mean(Dataset(y[perm], x[perm], SPACE2))
        for v in (0.0, 1.0, 2.0):
            assert a.eval(0, [v]) == b.eval(0, [v])

    def test_unseen_cell(self):
        est = fit_cell_mean(Dataset([0], np.zeros((1, 1)), SPACE2))
        with pytest.raises(UnseenCovariateError):
            est.eval(0, [7.0])

    def test_simplex_after_clip(self):
        rng = np.random.default_rng(1)
        y = rng.integers(0, 4, size=200)
        x = rng.integers(0, 4, size=(200, 1)).astype(float)
        est = fit_cell_mean(Dataset(y, x, SPACE4), clip=1e-3)
        P = est.eval_matrix(np.arange(4.0)[:, None])
        np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(P >= 1e-3 - 1e-15)

    def test_json_roundtrip(self):
        est = fit_cell_mean(Dataset([0, 1, 0], np.array([[0.0], [0.0], [1.0]]), SPACE2))
        back = CellMeanCcp.from_json(est.to_json())
        assert back.eval(0, [0.0]) == est.eval(0, [0.0])


class TestBspline:
    def test_constant_ccp_recovery(self):
        rng = np.random.default_rng(2)
        n = 5000
        x = rng.uniform(size=(n, 1))
        marg = np.array([0.3, 0.7])
        y = rng.choice(2, size=n, p=marg)
        est = fit_bspline(Dataset(y, x, SPACE2), degree=3, knots_per_dim=[3], clip=0.0)
        grid = np.linspace(0.01, 0.99, 50)[:, None]
        P = est.eval_matrix(grid)
        emp = np.bincount(y, minlength=2) / n
        assert np.max(np.abs(P[:, 0] - emp[0])) <= 3 * np.sqrt(2 / n)

    def test_linear_ccp_sup_error(self):
        rng = np.random.default_rng(3)
        n = 100000
        x = rng.uniform(size=(n, 1))
        p1 = 0.3 + 0.4 * x[:, 0]
        y = (rng.uniform(size=n) < p1).astype(int)
        est = fit_bspline(Dataset(y, x, SPACE2), degree=3, knots_per_dim=[5], clip=0.0)
        grid = np.linspace(x[:, 0].min(), x[:, 0].max(), 200)[:, None]
        P = est.eval_matrix(grid)
        want = 0.3 + 0.4 * grid[:, 0]
        assert np.max(np.abs(P[:, 1] - want)) <= 0.02

    def test_polynomial_exact_reproduction(self):
        # noise-free indicator fractions that are a cubic in x are inside the
        # spline space, so fitted values reproduce them to solver precision
        rng = np.random.default_rng(4)
        n = 4000
        x = np.linspace(0, 1, n)[:, None]
        poly = 0.2 + 0.3 * x[:, 0] ** 3
        reps = 50
        X = np.repeat(x, reps, axis=0)
        fractions = np.repeat(poly, reps)
        y = (np.tile(np.arange(reps), n) < fractions * reps).astype(int)
        # per-x frequencies are the rounded fractions, a near-cubic curve
        data = Dataset(y, X, SPACE2)
        est = fit_bspline(data, degree=3, knots_per_dim=[2], clip=0.0)
        P = est.eval_matrix(x)
        assert np.max(np.abs(P[:, 1] - np.ceil(poly * reps) / reps)) <= 0.03

    def test_rate_improves_with_n(self):
        rng = np.random.default_rng(5)
        errs = []
        for n in (4000, 16000):
            x = rng.uniform(size=(n, 1))
            p1 = 0.3 + 0.4 * x[:, 0]
            y = (rng.uniform(size=n) < p1).astype(int)
            est = fit_bspline(Dataset(y, x, SPACE2), degree=3, knots_per_dim=[4], clip=0.0)
            grid = np.linspace(x[:, 0].min(), x[:, 0].max(), 100)[:, None]
            errs.append(np.max(np.abs(est.eval_matrix(grid)[:, 1] - (0.3 + 0.4 * grid[:, 0]))))
        # quadrupling n should roughly halve the sup error (within slack)
        assert errs[1] <= errs[0] / 1.0
        assert errs[1] <= 1.6 * errs[0] / 2.0

    def test_overparameterization(self):
        x = np.linspace(0, 1, 10)[:, None]
        with pytest.raises(OverparameterizationError):
            fit_bspline(Dataset(np.zeros(10, int), x, SPACE2), degree=3, knots_per_dim=[20])

    def test_extrapolation_error(self):
        rng = np.random.default_rng(6)
        x = rng.uniform(0.2, 0.8, size=(200, 1))
        y = rng.integers(0, 2, size=200)
        est = fit_bspline(Dataset(y, x, SPACE2), degree=2, knots_per_dim=[1])
        with pytest.raises(ExtrapolationError):
            est.eval_matrix(np.array([[0.95]]))

    def test_tensor_product_2d(self):
        rng = np.random.default_rng(7)
        n = 20000
        x = rng.uniform(size=(n, 2))
        p1 = 0.2 + 0.3 * x[:, 0] + 0.3 * x[:, 1]
        y = (rng.uniform(size=n) < p1).astype(int)
        est = fit_bspline(Dataset(y, x, SPACE2), degree=2, knots_per_dim=[2, 2], clip=0.0)
        grid = np.column_stack([np.linspace(0.1, 0.9, 20), np.linspace(0.9, 0.1, 20)])
        P = est.eval_matrix(grid)
        want = 0.2 + 0.3 * grid[:, 0] + 0.3 * grid[:, 1]
        assert np.max(np.abs(P[:, 1] - want)) <= 0.05

    def test_simplex_property(self):
        rng = np.random.default_rng(8)
        n = 3000
        x = rng.uniform(size=(n, 2))
        y = rng.integers(0, 4, size=n)
        est = fit_bspline(Dataset(y, x, SPACE4), degree=2, knots_per_dim=[1, 1], clip=1e-3)
        P = est.eval_matrix(rng.uniform(0.01, 0.99, size=(500, 2)))
        np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-9)
        assert P.min() >= 1e-3 - 1e-12

    def test_matches_cell_mean_on_indicator_design(self):
        # degree-0 splines with no interior knots on a binary covariate act as
        # cell indicators, so the two estimators coincide
        rng = np.random.default_rng(9)
        n = 500
        x = rng.integers(0, 2, size=(n, 1)).astype(float)
        y = rng.integers(0, 2, size=n)
        data = Dataset(y, x, SPACE2)
        cm = fit_cell_mean(data, clip=0.0)
        bs = fit_bspline(data, degree=0, knots_per_dim=[1], clip=0.0)
        for v in (0.0, 1.0):
            assert bs.eval(0, [v]) == pytest.approx(cm.eval(0, [v]), abs=1e-10)

    def test_stratified_fit_with_small_cell_pools(self):
        rng = np.random.default_rng(10)
        n = 200
        xd = rng.integers(0, 2, size=(n, 1)).astype(float)
        xc = rng.uniform(size=(n, 1))
        X = np.hstack([xc, xd])
        y = ((rng.uniform(size=n) < 0.3 + 0.4 * xd[:, 0])).astype(int)
        data = Dataset(y, X, SPACE2)
        with pytest.warns(RuntimeWarning):
            est = fit_bspline(data, degree=3, knots_per_dim=[20], clip=1e-3, discrete_cols=[1])
        # evaluation falls back to the pooled fit for the small cells
        mid = np.median(xc)
        assert 0.0 < est.eval(1, [mid, 0.0]) < 1.0

    def test_json_roundtrip(self):
        rng = np.random.default_rng(11)
        x = rng.uniform(size=(300, 1))
        y = rng.integers(0, 2, size=300)
        est = fit_bspline(Dataset(y, x, SPACE2), degree=2, knots_per_dim=[2])
        back = BsplineCcp.from_json(est.to_json())
        grid = rng.uniform(0.05, 0.95, size=(20, 1))
        np.testing.assert_allclose(back.eval_matrix(grid), est.eval_matrix(grid), atol=1e-14)


class TestDefaultBasisDim:
    def test_reference_value(self):
        # (7017 / ln 7017)^(1/3) = 9.25 -> scalar rule 9 -> 3 per dimension
        assert default_basis_dim(7017, 2, 2.0) == 9

    def test_nondecreasing_in_n(self):
        vals = [default_basis_dim(n, 2, 2.0) for n in (100, 1000, 10000, 100000)]
        assert vals == sorted(vals)

    def test_no_continuous_covariates(self):
        assert default_basis_dim(5000, 0, 2.0) == 0
