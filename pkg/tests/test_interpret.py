import itertools
import json

import numpy as np
import pytest
from scipy.optimize import minimize

from evop.interpret import (LassoPath, build_descriptors, default_lambdas, lambda_max, lasso_path,
                            normalized_coefficients, write_coefficients_json, write_path_csv)


def lasso_objective(D, t, lam, b):
    return 0.5 * np.mean((t - D @ b) ** 2) + lam * np.abs(b).sum()


def brute_force(D, t, lam):
    """Grid search over coefficient space, refined around the incumbent, then polished."""
    p = D.shape[1]
    center, width = np.zeros(p), 4.0
    best = center
    for _ in range(12):
        axes = [np.linspace(c - width, c + width, 21) for c in center]
        grid = np.array(list(itertools.product(*axes)))
        vals = 0.5 * np.mean((t[:, None] - D @ grid.T) ** 2, axis=0) + lam * np.abs(grid).sum(axis=1)
        best = grid[np.argmin(vals)]
        center, width = best, width / 5
    return best


@pytest.fixture
def problem():
    rng = np.random.default_rng(21)
    X = rng.normal(size=(50, 3))
    lib = build_descriptors(X)
    t = lib.D @ np.array([1.5, 0.0, -0.7]) + 0.3 * rng.normal(size=50)
    return lib, t - t.mean()


class TestDescriptors:
    def test_coordinates(self, rng):
        lib = build_descriptors(rng.normal(size=(30, 3)))
        assert lib.names == ["x0", "x1", "x2"] and lib.D.shape == (30, 3)

    def test_product_before_standardization(self):
        states = np.array([[1.0, 2.0, 0.0], [2.0, 1.0, 5.0], [0.0, 0.0, 1.0]])
        lib = build_descriptors(states, ["x0*x1"])
        raw = lib.D[:, 0] * lib.scale[0] + lib.mean[0]
        assert np.allclose(raw, [2.0, 2.0, 0.0])

    def test_standardized(self, rng):
        lib = build_descriptors(rng.normal(3.0, 5.0, size=(200, 3)), ["coordinates", "products", "squares", "norm2"])
        assert lib.n_descriptors == 10
        assert np.abs(lib.D.mean(axis=0)).max() <= 1e-12
        assert np.abs(lib.D.var(axis=0) - 1).max() <= 1e-10

    def test_constant_dropped(self, rng):
        X = np.c_[rng.normal(size=20), np.full(20, 4.0)]
        with pytest.warns(RuntimeWarning, match="x1"):
            lib = build_descriptors(X)
        assert lib.names == ["x0"] and lib.dropped == ["x1"]

    def test_duplicates_and_unknown(self, rng):
        X = rng.normal(size=(10, 2))
        with pytest.raises(ValueError, match="duplicate"):
            build_descriptors(X, ["coordinates", "x0"])
        with pytest.raises(ValueError, match="unknown"):
            build_descriptors(X, ["sin(x0)"])
        with pytest.raises(ValueError, match="coordinate 5"):
            build_descriptors(X, ["x5"])

    def test_tabulated(self, rng):
        X = rng.normal(size=(10, 2))
        lib = build_descriptors(X, ["x0"], tabulated={"hbond": rng.normal(size=10)})
        assert lib.names == ["x0", "hbond"]


class TestLasso:
    def test_above_lambda_max_is_zero(self, problem):
        lib, t = problem
        lmax = lambda_max(lib.D, t)
        path = lasso_path(lib, t, [2 * lmax, lmax])
        assert np.all(path.coefficients == 0.0)
        assert np.any(lasso_path(lib, t, [0.99 * lmax]).coefficients != 0)

    def test_zero_penalty_is_ols(self, problem):
        lib, t = problem
        ols = np.linalg.solve(lib.D.T @ lib.D, lib.D.T @ t)
        path = lasso_path(lib, t, [0.0])
        assert np.max(np.abs(path.coefficients[0] - ols)) <= 1e-6

    @pytest.mark.parametrize("frac", [0.5, 0.2, 0.05])
    def test_brute_force(self, problem, frac):
        lib, t = problem
        lam = frac * lambda_max(lib.D, t)
        got = lasso_path(lib, t, [lam], center=False).coefficients[0]
        ref = brute_force(lib.D, t, lam)
        assert np.max(np.abs(got - ref)) <= 1e-4
        # and no point nearby does better
        res = minimize(lambda b: lasso_objective(lib.D, t, lam, b), got, method="Nelder-Mead",
                       options=dict(xatol=1e-12, fatol=1e-15))
        assert lasso_objective(lib.D, t, lam, got) <= res.fun + 1e-12

    def test_kkt(self, problem):
        lib, t = problem
        lams = default_lambdas(lib.D, t, 20)
        path = lasso_path(lib, t, lams)
        n = len(t)
        for lam, b in zip(path.lambdas, path.coefficients):
            g = lib.D.T @ (t - lib.D @ b) / n
            active = b != 0
            assert np.allclose(g[active], lam * np.sign(b[active]), atol=1e-7)
            assert np.all(np.abs(g[~active]) <= lam + 1e-7)

    def test_mse_nonincreasing(self, rng):
        X = rng.normal(size=(300, 3))
        lib = build_descriptors(X, ["coordinates", "products", "squares"])
        t = X[:, 0] * X[:, 1] - 0.5 * X[:, 2] + 0.1 * rng.normal(size=300)
        path = lasso_path(lib, t)
        assert np.all(np.diff(path.mse) <= 1e-12)
        assert path.n_active[0] == 0

    def test_rejects_ascending(self, problem):
        lib, t = problem
        with pytest.raises(ValueError, match="descending"):
            lasso_path(lib, t, [0.1, 0.2])

    def test_centering(self, problem):
        lib, t = problem
        path = lasso_path(lib, t + 7.0, [0.0])
        assert path.intercept == pytest.approx(7.0)


class TestNormalized:
    def _path(self, beta):
        beta = np.asarray(beta, float)[None, :]
        return LassoPath(np.array([0.1]), beta, np.zeros(1), np.count_nonzero(beta, axis=1),
                         ["a", "b", "c"][:beta.shape[1]])

    def test_two_thirds(self):
        out = normalized_coefficients(self._path([2.0, -1.0, 0.0]), 0.1)
        assert [n for n, _ in out] == ["a", "b"]
        assert np.allclose([c for _, c in out], [2 / 3, -1 / 3])

    def test_single(self):
        assert normalized_coefficients(self._path([0.0, -3.0, 0.0]), 0.1) == [("b", -1.0)]

    def test_lambda_not_on_path(self):
        with pytest.raises(ValueError):
            normalized_coefficients(self._path([1.0, 0.0, 0.0]), 0.2)

    def test_files(self, tmp_path, problem):
        lib, t = problem
        path = lasso_path(lib, t, default_lambdas(lib.D, t, 5))
        write_path_csv(path, tmp_path / "p.csv")
        lines = (tmp_path / "p.csv").read_text().splitlines()
        assert lines[0] == "lambda,mse,n_active,x0,x1,x2" and len(lines) == 6
        write_coefficients_json(tmp_path / "c.json", path, path.lambdas[-1])
        doc = json.loads((tmp_path / "c.json").read_text())
        assert abs(sum(abs(c["coefficient"]) for c in doc["coefficients"]) - 1) < 1e-12
        # ranked by magnitude, formatted as (name, value)
        mags = [abs(c["coefficient"]) for c in doc["coefficients"]]
        assert mags == sorted(mags, reverse=True)
