"""Covariance estimation, EMA buffers and closed-form operator estimators."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg

from .exceptions import SingularMatrixError

__all__ = [
    "CovarianceBuffers",
    "EvolutionOperatorModel",
    "batch_covariances",
    "ema_update",
    "least_squares_operator",
    "optimal_predictor",
    "save_operator",
    "load_operator",
]


def batch_covariances(Zx, Zy):
    """Uncentered covariances ``(C_X, C_Y, C_XY)`` of paired embeddings."""
    Zx = np.asarray(Zx, dtype=np.float64)
    Zy = np.asarray(Zy, dtype=np.float64)
    if Zx.shape != Zy.shape or Zx.ndim != 2:
        raise ValueError(f"embedding batches must be equal-shape matrices, got {Zx.shape}, {Zy.shape}")
    n = len(Zx)
    if n == 0:
        raise ValueError("cannot compute covariances of an empty batch")
    return Zx.T @ Zx / n, Zy.T @ Zy / n, Zx.T @ Zy / n


@dataclass
class CovarianceBuffers:
    """Exponential moving averages of ``C_X``, ``C_Y`` and ``C_XY``.

    The first update copies the batch covariances, so there is no cold-start
    bias to correct.
    """

    dim: int
    ema_rate: float = 0.01
    C_X: np.ndarray = None
    C_Y: np.ndarray = None
    C_XY: np.ndarray = None
    update_count: int = 0

    def __post_init__(self):
        if not 0 < self.ema_rate <= 1:
            raise ValueError(f"ema_rate must lie in (0, 1], got {self.ema_rate}")
        for name in ("C_X", "C_Y", "C_XY"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros((self.dim, self.dim)))

    def update(self, C_X, C_Y, C_XY) -> "CovarianceBuffers":
        for a in (C_X, C_Y, C_XY):
            if np.shape(a) != (self.dim, self.dim):
                raise ValueError(f"batch covariance shape {np.shape(a)} != buffer shape {(self.dim, self.dim)}")
        if self.update_count == 0:
            self.C_X, self.C_Y, self.C_XY = (np.array(a, dtype=np.float64) for a in (C_X, C_Y, C_XY))
        else:
            b = self.ema_rate
            self.C_X = (1 - b) * self.C_X + b * C_X
            self.C_Y = (1 - b) * self.C_Y + b * C_Y
            self.C_XY = (1 - b) * self.C_XY + b * C_XY
        self.update_count += 1
        return self

    def copy(self) -> "CovarianceBuffers":
        return CovarianceBuffers(self.dim, self.ema_rate, self.C_X.copy(), self.C_Y.copy(),
                                 self.C_XY.copy(), self.update_count)

    def to_dict(self) -> dict:
        return dict(dim=self.dim, ema_rate=self.ema_rate, update_count=self.update_count,
                    C_X=self.C_X.tolist(), C_Y=self.C_Y.tolist(), C_XY=self.C_XY.tolist())

    @classmethod
    def from_dict(cls, d) -> "CovarianceBuffers":
        return cls(int(d["dim"]), float(d["ema_rate"]), np.array(d["C_X"], dtype=np.float64),
                   np.array(d["C_Y"], dtype=np.float64), np.array(d["C_XY"], dtype=np.float64),
                   int(d["update_count"]))


def ema_update(buffers: CovarianceBuffers, batch_covs) -> CovarianceBuffers:
    """Fold ``batch_covs = (C_X, C_Y, C_XY)`` into ``buffers`` (in place)."""
    return buffers.update(*batch_covs)


@dataclass
class EvolutionOperatorModel:
    """Matrix estimate of the evolution operator on encoder features.

    ``E`` acts on coefficient vectors: for ``f = <w, phi>`` the one-lag
    conditional expectation is ``<E w, phi(x)>``.
    """

    E: np.ndarray
    ridge: float
    lag_time: float = 1.0
    source: str = "full_pass"
    covariances: tuple | None = field(default=None, repr=False)

    @property
    def dim(self) -> int:
        return self.E.shape[0]


def _spd_solve(A, B, what):
    try:
        c = scipy.linalg.cho_factor(A, lower=False, check_finite=True)
    except np.linalg.LinAlgError:
        raise SingularMatrixError(f"{what} is singular or not positive definite; use a ridge > 0") from None
    return scipy.linalg.cho_solve(c, B)


def _regularized(C, reg, name):
    C = np.asarray(C, dtype=np.float64)
    if reg < 0:
        raise ValueError("regularization must be >= 0")
    A = 0.5 * (C + C.T) + reg * np.eye(len(C))
    if reg == 0:
        cond = np.linalg.cond(A)
        if not np.isfinite(cond) or cond >= 1e12:
            raise SingularMatrixError(f"{name} is numerically singular (condition {cond:.2e}); use a ridge > 0")
    return A


def least_squares_operator(C_X, C_XY, ridge: float = 1e-6, lag_time: float = 1.0,
                           source: str = "full_pass", C_Y=None) -> EvolutionOperatorModel:
    """Ridge least-squares estimator ``E = (C_X + ridge I)^{-1} C_XY``."""
    A = _regularized(C_X, ridge, "C_X")
    C_XY = np.asarray(C_XY, dtype=np.float64)
    if C_XY.shape != A.shape:
        raise ValueError(f"C_XY shape {C_XY.shape} != C_X shape {A.shape}")
    E = _spd_solve(A, C_XY, "C_X + ridge*I")
    covs = None if C_Y is None else (np.asarray(C_X), np.asarray(C_Y), C_XY)
    return EvolutionOperatorModel(E, float(ridge), float(lag_time), source, covs)


def optimal_predictor(C_X, C_XY, C_Y, reg: float = 0.0) -> np.ndarray:
    """Minimizer of the covariance-form loss, ``(C_X+reg)^{-1} C_XY (C_Y+reg)^{-1}``."""
    A = _regularized(C_X, reg, "C_X")
    Bm = _regularized(C_Y, reg, "C_Y")
    left = _spd_solve(A, np.asarray(C_XY, dtype=np.float64), "C_X + reg*I")
    # right-multiplication by a symmetric inverse
    return _spd_solve(Bm, left.T, "C_Y + reg*I").T


def save_operator(path, model: EvolutionOperatorModel) -> None:
    doc = dict(d=model.dim, E=model.E.tolist(), ridge=model.ridge, lag_time=model.lag_time,
               source=model.source)
    if model.covariances is not None:
        C_X, C_Y, C_XY = model.covariances
        doc["covariances"] = dict(C_X=np.asarray(C_X).tolist(), C_Y=np.asarray(C_Y).tolist(),
                                  C_XY=np.asarray(C_XY).tolist())
    Path(path).write_text(json.dumps(doc))


def load_operator(path) -> EvolutionOperatorModel:
    doc = json.loads(Path(path).read_text())
    covs = None
    if "covariances" in doc:
        c = doc["covariances"]
        covs = tuple(np.array(c[k], dtype=np.float64) for k in ("C_X", "C_Y", "C_XY"))
    E = np.array(doc["E"], dtype=np.float64)
    if E.shape != (doc["d"], doc["d"]):
        raise ValueError(f"{path}: E has shape {E.shape}, header says d={doc['d']}")
    return EvolutionOperatorModel(E, float(doc["ridge"]), float(doc["lag_time"]), doc["source"], covs)
