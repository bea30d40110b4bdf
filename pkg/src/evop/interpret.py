"""Sparse regression of eigenfunctions onto a library of state descriptors."""

from __future__ import annotations

import csv
import json
import re
import warnings
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from .exceptions import ConvergenceError

__all__ = [
    "DescriptorLibrary",
    "LassoPath",
    "build_descriptors",
    "lambda_max",
    "default_lambdas",
    "lasso_path",
    "normalized_coefficients",
    "write_path_csv",
    "write_coefficients_json",
]

_COORD = re.compile(r"^x(\d+)$")
_PROD = re.compile(r"^x(\d+)\*x(\d+)$")
_SQUARE = re.compile(r"^x(\d+)\^2$")


@dataclass
class DescriptorLibrary:
    names: list[str]
    D: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    dropped: list[str] = field(default_factory=list)

    @property
    def n_descriptors(self) -> int:
        return len(self.names)


def _expand(item, dim):
    if item == "coordinates":
        return [f"x{i}" for i in range(dim)]
    if item == "products":
        return [f"x{i}*x{j}" for i, j in combinations(range(dim), 2)]
    if item == "squares":
        return [f"x{i}^2" for i in range(dim)]
    return [item]


def _evaluate(name, X):
    dim = X.shape[1]

    def col(i):
        i = int(i)
        if i >= dim:
            raise ValueError(f"descriptor {name!r} refers to coordinate {i}, state has dimension {dim}")
        return X[:, i]

    if name == "norm2":
        return np.sum(X * X, axis=1)
    if m := _COORD.match(name):
        return col(m[1])
    if m := _PROD.match(name):
        return col(m[1]) * col(m[2])
    if m := _SQUARE.match(name):
        return col(m[1]) ** 2
    raise ValueError(f"unknown descriptor {name!r}")


def build_descriptors(states, spec=("coordinates",), tabulated: dict | None = None) -> DescriptorLibrary:
    """Evaluate and standardize descriptor columns.

    ``spec`` items are ``"coordinates"``, ``"products"``, ``"squares"``,
    ``"norm2"`` or single descriptors such as ``"x0"``, ``"x0*x2"``,
    ``"x1^2"``. ``tabulated`` maps extra names to precomputed columns.
    Constant columns are dropped with a warning.
    """
    X = np.asarray(getattr(states, "states", states), dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    names, cols = [], []
    for item in spec:
        for name in _expand(item, X.shape[1]):
            names.append(name)
            cols.append(_evaluate(name, X))
    for name, values in (tabulated or {}).items():
        values = np.asarray(values, dtype=np.float64).ravel()
        if len(values) != len(X):
            raise ValueError(f"tabulated descriptor {name!r} has {len(values)} rows, expected {len(X)}")
        names.append(name)
        cols.append(values)
    if len(set(names)) != len(names):
        dup = sorted({n for n in names if names.count(n) > 1})
        raise ValueError(f"duplicate descriptor names: {dup}")
    if not cols:
        raise ValueError("empty descriptor specification")
    D = np.column_stack(cols)
    mean = D.mean(axis=0)
    scale = D.std(axis=0)
    const = scale <= 1e-12 * np.maximum(1.0, np.abs(mean))
    dropped = [n for n, c in zip(names, const) if c]
    if dropped:
        warnings.warn(f"dropping constant descriptors: {dropped}", RuntimeWarning)
    keep = ~const
    D = (D[:, keep] - mean[keep]) / scale[keep]
    return DescriptorLibrary([n for n, k in zip(names, keep) if k], D, mean[keep], scale[keep], dropped)


@dataclass
class LassoPath:
    lambdas: np.ndarray
    coefficients: np.ndarray  # (n_lambdas, p)
    mse: np.ndarray
    n_active: np.ndarray
    names: list[str]
    intercept: float = 0.0
    n_sweeps: np.ndarray | None = None

    def index_of(self, lam) -> int:
        hits = np.flatnonzero(np.isclose(self.lambdas, lam, rtol=1e-12, atol=0.0))
        if not len(hits):
            raise ValueError(f"lambda={lam} is not on the path")
        return int(hits[0])


def lambda_max(D, target) -> float:
    """Smallest penalty for which the all-zero solution is optimal."""
    return float(np.max(np.abs(D.T @ target)) / len(target))


def default_lambdas(D, target, n: int = 50, min_ratio: float = 1e-4) -> np.ndarray:
    lmax = lambda_max(D, target)
    return np.logspace(np.log10(lmax), np.log10(lmax * min_ratio), n)


def _soft(a, t):
    return np.sign(a) * max(abs(a) - t, 0.0)


def lasso_path(lib, target, lambdas=None, tol: float = 1e-8, max_sweeps: int = 100_000,
               center: bool = True) -> LassoPath:
    """Coordinate-descent LASSO along a descending penalty path.

    Minimizes ``(1/2N)||t - D b||^2 + lam ||b||_1`` at each ``lam``, warm
    started from the previous solution, until the largest coefficient change
    in a sweep is below ``tol``. Coordinates are swept in column order, so
    among collinear descriptors the earlier one wins ties. With ``center``
    the target mean is removed first (an unpenalized intercept; the library
    columns are already centered).
    """
    D = lib.D if isinstance(lib, DescriptorLibrary) else np.asarray(lib, dtype=np.float64)
    names = lib.names if isinstance(lib, DescriptorLibrary) else [f"d{j}" for j in range(D.shape[1])]
    t = np.asarray(target, dtype=np.float64).ravel()
    if not np.isfinite(t).all():
        raise ValueError("target has non-finite values")
    n, p = D.shape
    if len(t) != n:
        raise ValueError(f"target has {len(t)} rows, descriptors have {n}")
    if n <= p:
        warnings.warn(f"N={n} <= p={p}: the unpenalized problem is not identifiable", RuntimeWarning)
    intercept = float(t.mean()) if center else 0.0
    t = t - intercept
    if lambdas is None:
        lambdas = default_lambdas(D, t)
    lambdas = np.asarray(lambdas, dtype=np.float64)
    if np.any(lambdas < 0):
        raise ValueError("penalties must be >= 0")
    if np.any(np.diff(lambdas) > 0):
        raise ValueError("lambdas must be in descending order")
    G = D.T @ D / n
    c = D.T @ t / n
    diagG = np.diag(G).copy()
    beta = np.zeros(p)
    coefs = np.zeros((len(lambdas), p))
    sweeps = np.zeros(len(lambdas), dtype=int)
    lmax = float(np.max(np.abs(c))) if p else 0.0
    for k, lam in enumerate(lambdas):
        if lam >= lmax:
            beta[:] = 0.0
        else:
            # gradient of the smooth part is G beta - c; track G beta incrementally
            Gb = G @ beta
            for sweep in range(1, max_sweeps + 1):
                delta = 0.0
                for j in range(p):
                    if diagG[j] == 0.0:
                        continue
                    old = beta[j]
                    rho = c[j] - Gb[j] + diagG[j] * old
                    new = _soft(rho, lam) / diagG[j]
                    if new != old:
                        Gb += G[:, j] * (new - old)
                        beta[j] = new
                        delta = max(delta, abs(new - old))
                if delta < tol:
                    break
            else:
                raise ConvergenceError(f"LASSO did not converge within {max_sweeps} sweeps at lambda index {k} "
                                       f"(lambda={lam:.3e})")
            sweeps[k] = sweep
        coefs[k] = beta
    resid = t[:, None] - D @ coefs.T
    mse = np.mean(resid ** 2, axis=0)
    n_active = np.count_nonzero(coefs, axis=1)
    return LassoPath(lambdas, coefs, mse, n_active, list(names), intercept, sweeps)


def normalized_coefficients(path: LassoPath, lam) -> list[tuple[str, float]]:
    """Nonzero coefficients at ``lam`` scaled to unit L1 norm, largest magnitude first."""
    beta = path.coefficients[path.index_of(lam)]
    total = np.abs(beta).sum()
    if total == 0:
        return []
    nz = np.flatnonzero(beta)
    order = nz[np.argsort(-np.abs(beta[nz]), kind="stable")]
    return [(path.names[j], float(beta[j] / total)) for j in order]


def write_path_csv(path_obj: LassoPath, out) -> None:
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lambda", "mse", "n_active", *path_obj.names])
        for k, lam in enumerate(path_obj.lambdas):
            w.writerow([repr(float(lam)), repr(float(path_obj.mse[k])), int(path_obj.n_active[k]),
                        *(repr(float(b)) for b in path_obj.coefficients[k])])


def write_coefficients_json(out, path_obj: LassoPath, lam) -> None:
    coefs = normalized_coefficients(path_obj, lam)
    doc = dict(
        lam=float(lam),
        mse=float(path_obj.mse[path_obj.index_of(lam)]),
        coefficients=[dict(name=n, coefficient=c) for n, c in coefs],
    )
    Path(out).write_text(json.dumps(doc, indent=2))
