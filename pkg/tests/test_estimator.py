import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from qivreg.errors import ValidationError
from qivreg.estimator import QuasiIVRegressor


def make_data(rng, n=120, p=25, noise=0.4):
    X = rng.standard_normal((n, p))
    beta = np.zeros(p)
    beta[:3] = [1.2, -0.8, 0.6]
    y = X @ beta + noise * rng.standard_normal(n)
    return X, y, beta


class TestSklearnApi:
    def test_get_set_params_round_trip(self):
        model = QuasiIVRegressor(tau=0.2, method="m2")
        params = model.get_params()
        assert params["tau"] == 0.2
        assert params["method"] == "m2"
        model.set_params(tau=0.3)
        assert model.tau == 0.3

    def test_clone(self):
        model = QuasiIVRegressor(tau=0.17, d=2)
        cloned = clone(model)
        assert cloned.tau == 0.17
        assert cloned.d == 2

    def test_not_fitted_error(self, rng):
        with pytest.raises(NotFittedError):
            QuasiIVRegressor().predict(rng.standard_normal((3, 5)))

    def test_score_available(self, rng):
        X, y, _ = make_data(rng)
        model = QuasiIVRegressor(random_state=2).fit(X, y)
        assert model.score(X, y) > 0.5


class TestFitAttributes:
    def test_selected_and_coef(self, rng):
        X, y, beta = make_data(rng)
        model = QuasiIVRegressor(random_state=0).fit(X, y)
        assert 1 in model.selected_
        assert model.coef_.shape == (X.shape[1],)
        nonzero = np.flatnonzero(model.coef_) + 1
        assert set(nonzero) == set(model.selected_)
        assert model.n_features_in_ == X.shape[1]

    def test_theta_near_truth_on_clean_data(self):
        rng = np.random.default_rng(10)
        X, y, beta = make_data(rng, n=400, noise=0.2)
        model = QuasiIVRegressor(random_state=1).fit(X, y)
        for j, t in zip(model.selected_, model.theta_):
            assert abs(t - beta[j - 1]) < 0.25

    def test_ci_contains_theta_hat(self, rng):
        X, y, _ = make_data(rng)
        model = QuasiIVRegressor(random_state=3).fit(X, y)
        assert np.all(model.ci_[:, 0] <= model.theta_)
        assert np.all(model.theta_ <= model.ci_[:, 1])

    def test_method_m2_scalar_instrument(self, rng):
        X, y, _ = make_data(rng)
        model = QuasiIVRegressor(method="m2", random_state=4).fit(X, y)
        assert model.plan_.rank == 1
        assert model.plan_.method == "method2"

    def test_fixed_bandwidth_respected(self, rng):
        X, y, _ = make_data(rng)
        model = QuasiIVRegressor(bandwidth=0.77, random_state=5).fit(X, y)
        assert model.h_ == 0.77
        assert not model.gcv_used_

    def test_fixed_lambda_and_d(self, rng):
        X, y, _ = make_data(rng)
        model = QuasiIVRegressor(lambda_mode=30.0, d=2, random_state=6).fit(X, y)
        assert model.lambda_used_ == 30.0
        assert model.plan_.whiten.d == 2


class TestPredictModes:
    def test_modes_differ_only_by_centered_g(self, rng):
        X, y, _ = make_data(rng)
        model = QuasiIVRegressor(random_state=7).fit(X, y)
        adj = model.predict(X, mode="adjusted")
        wrk = model.predict(X, mode="working")
        assert adj.shape == wrk.shape == y.shape
        assert abs(np.mean(adj - wrk)) < 1e-10  # training-sample means agree

    def test_unknown_mode_rejected(self, rng):
        X, y, _ = make_data(rng)
        model = QuasiIVRegressor(random_state=8).fit(X, y)
        with pytest.raises(ValidationError):
            model.predict(X, mode="nope")

    def test_deterministic_given_state(self, rng):
        X, y, _ = make_data(rng)
        a = QuasiIVRegressor(random_state=9).fit(X, y)
        b = QuasiIVRegressor(random_state=9).fit(X, y)
        assert np.array_equal(a.predict(X), b.predict(X))
        assert np.array_equal(a.theta_, b.theta_)

    def test_theoretical_lambda_mode_runs(self, rng):
        X, y, _ = make_data(rng)
        model = QuasiIVRegressor(lambda_mode="theoretical", random_state=11).fit(X, y)
        assert model.sigma_hat_ is not None
        assert model.lambda_used_ > 0


class TestExternalSelector:
    def test_beta_init_plugs_in(self, rng):
        from qivreg.data import Dataset, standardize
        from qivreg.estimator import run_selection

        X, y, _ = make_data(rng)
        ds = standardize(Dataset.from_arrays(X, y))
        external = np.zeros(X.shape[1])
        external[[0, 1, 5]] = [0.9, -0.5, 0.2]
        stage = run_selection(ds, tau=0.1, beta_init=external)
        assert list(stage.result.selected) == [1, 2, 6]
        assert stage.lambda_used == 0.0

    def test_beta_init_respects_screening(self, rng):
        from qivreg.data import Dataset, standardize
        from qivreg.estimator import run_selection

        X, y, _ = make_data(rng)
        ds = standardize(Dataset.from_arrays(X, y))
        external = np.full(X.shape[1], 0.5)
        stage = run_selection(ds, tau=0.1, sis_keep=4, beta_init=external)
        assert set(stage.result.selected) <= set(stage.result.screened_indices)


class TestPipelineCoverage:
    def test_ci_covers_truth_in_most_seeded_runs(self):
        # 100 seeded end-to-end fits at level 0.95; per-coordinate coverage
        # of the true coefficients must reach 90%
        covered = total = 0
        for s in range(100):
            gen = np.random.default_rng(80_000 + s)
            n, p = 250, 30
            X = gen.standard_normal((n, p))
            beta = np.zeros(p)
            beta[:3] = [1.0, -0.8, 0.6]
            y = X @ beta + 0.3 * gen.standard_normal(n)
            model = QuasiIVRegressor(random_state=s).fit(X, y)
            for j, (lo, hi) in zip(model.selected_, model.ci_):
                covered += int(lo <= beta[j - 1] <= hi)
                total += 1
        assert covered / total >= 0.90
