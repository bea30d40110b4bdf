"""Spectral decomposition of a learned operator and what can be read off it.

For ``E = Q diag(lam) Q^{-1}`` and an observable ``f = <w, phi>`` the
expected value ``s`` lags ahead splits into modes
``lam_i^s * Psi_i(x) * (Q^{-1} w)_i`` with eigenfunctions
``Psi_i(x) = <q_i, phi(x)>``.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import ConvergenceError
from .operator import EvolutionOperatorModel, batch_covariances, least_squares_operator

__all__ = [
    "SpectralDecomposition",
    "ModeReport",
    "eig",
    "implied_timescale",
    "mode_frequency",
    "eigenfunction_eval",
    "mode_decomposition",
    "forecast",
    "forecast_state",
    "state_observables",
    "AffineFeatures",
    "linls_baseline",
    "filter_spectrum",
    "rmse",
    "write_spectrum_csv",
    "write_eigenfunction_csv",
]


@dataclass(frozen=True)
class SpectralDecomposition:
    eigenvalues: np.ndarray
    Q: np.ndarray
    Qinv: np.ndarray
    lag_time: float = 1.0

    def __len__(self):
        return len(self.eigenvalues)

    @property
    def timescales(self) -> np.ndarray:
        return np.array([implied_timescale(l, self.lag_time) for l in self.eigenvalues])

    @property
    def frequencies(self) -> np.ndarray:
        return np.array([mode_frequency(l, self.lag_time) if l != 0 else 0.0 for l in self.eigenvalues])

    @property
    def condition(self) -> float:
        return float(np.linalg.cond(self.Q)) if len(self) else 1.0


def _sort_key_order(lam):
    # descending |lam|, then real part, then imaginary part; rounding keeps
    # conjugate pairs and numerically equal moduli together
    mod = np.round(np.abs(lam), 10)
    re = np.round(lam.real, 10)
    im = np.round(lam.imag, 10)
    return np.lexsort((-im, -re, -mod))


def _fix_phase(Q):
    Q = Q / np.linalg.norm(Q, axis=0, keepdims=True)
    mags = np.abs(Q)
    # first index within round-off of the maximum, for platform stability
    piv = np.argmax(mags >= mags.max(axis=0, keepdims=True) * (1 - 1e-10), axis=0)
    phase = Q[piv, np.arange(Q.shape[1])]
    return Q * (np.abs(phase) / phase)[None, :]


def eig(E, lag_time: float = 1.0) -> SpectralDecomposition:
    """Eigendecomposition of a real square matrix.

    Eigenvectors are normalized to unit length with their largest-magnitude
    component real and positive; modes are sorted by descending modulus.
    """
    if isinstance(E, EvolutionOperatorModel):
        lag_time = E.lag_time
        E = E.E
    E = np.asarray(E, dtype=np.float64)
    if E.ndim != 2 or E.shape[0] != E.shape[1]:
        raise ValueError(f"E must be square, got shape {E.shape}")
    if not np.isfinite(E).all():
        raise ValueError("E has non-finite entries")
    try:
        lam, Q = np.linalg.eig(E)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceError(f"eigensolver did not converge for {E.shape} matrix: {exc}") from exc
    lam = lam.astype(np.complex128)
    Q = Q.astype(np.complex128)
    order = _sort_key_order(lam)
    lam, Q = lam[order], _fix_phase(Q[:, order])
    # exact conjugate symmetry for real input
    lam = np.where(np.abs(lam.imag) <= 1e-14 * max(1.0, np.abs(lam).max(initial=0)), lam.real + 0j, lam)
    Qinv = np.linalg.inv(Q)
    return SpectralDecomposition(lam, Q, Qinv, float(lag_time))


def implied_timescale(lam, dt: float = 1.0) -> float:
    """Decay time ``-dt / ln|lam|``; ``inf`` for ``|lam| >= 1`` and ``0`` for ``lam == 0``."""
    r = abs(lam)
    if r >= 1.0:
        return math.inf
    if r == 0.0:
        return 0.0
    return -dt / math.log(r)


def mode_frequency(lam, dt: float = 1.0) -> float:
    """Oscillation frequency in cycles per unit time, ``arg(lam) / (2 pi dt)``."""
    lam = complex(lam)
    return math.atan2(lam.imag, lam.real) / (2.0 * math.pi * dt)


def eigenfunction_eval(decomp: SpectralDecomposition, i: int, z) -> np.ndarray:
    """``Psi_i = <q_i, z>`` for one embedding or a batch of row embeddings."""
    if not 0 <= i < len(decomp):
        raise IndexError(f"mode index {i} out of range for {len(decomp)} modes")
    return np.asarray(z) @ decomp.Q[:, i]


@dataclass
class ModeReport:
    """Per-mode contributions to ``<E^s w, z>``; array entry ``i`` is mode ``i``."""

    eigenvalues: np.ndarray
    decay_rate: np.ndarray
    frequency: np.ndarray
    timescale: np.ndarray
    state_coefficient: np.ndarray
    observable_coefficient: np.ndarray
    contribution: np.ndarray
    steps: int
    ill_conditioned: bool = False

    @property
    def total(self) -> complex:
        return complex(self.contribution.sum())


def mode_decomposition(decomp: SpectralDecomposition, w, z, steps: int = 1) -> ModeReport:
    if steps < 1:
        raise ValueError("steps must be >= 1")
    w = np.asarray(w, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    lam = decomp.eigenvalues
    psi = z @ decomp.Q
    coef = decomp.Qinv @ w
    contrib = lam ** steps * psi * coef
    cond = decomp.condition
    ill = cond > 1e12
    if ill:
        warnings.warn(f"eigenvector basis is ill-conditioned (cond={cond:.2e})", RuntimeWarning)
    return ModeReport(
        eigenvalues=lam,
        decay_rate=np.abs(lam),
        frequency=np.array([mode_frequency(l, decomp.lag_time) if l != 0 else 0.0 for l in lam]),
        timescale=decomp.timescales,
        state_coefficient=psi,
        observable_coefficient=coef,
        contribution=contrib,
        steps=steps,
        ill_conditioned=ill,
    )


class AffineFeatures:
    """Raw state with an appended constant column: ``phi(x) = [x, 1]``."""

    def __init__(self, input_dim: int):
        self.input_dim = input_dim
        self.output_dim = input_dim + 1

    def __call__(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return np.concatenate([X, np.ones((len(X), 1))], axis=1)

    def state_observables(self) -> np.ndarray:
        return np.eye(self.output_dim)[:, :self.input_dim]


def state_observables(encoder) -> np.ndarray:
    """Columns ``w_k`` selecting the raw-state slots of an encoder's output."""
    if hasattr(encoder, "state_observables"):
        return encoder.state_observables()
    cfg = encoder.config
    if not cfg.append_raw_state:
        raise ValueError("encoder has no raw-state passthrough; the state is not a linear observable")
    return np.eye(cfg.output_dim)[:, cfg.latent_dim:]


def forecast(model: EvolutionOperatorModel, features, X, W) -> np.ndarray:
    """Predicted observables ``<E w_k, phi(x)>`` for each row of ``X`` and column of ``W``."""
    Z = features(X)
    W = np.asarray(W, dtype=np.float64)
    if W.ndim == 1:
        W = W[:, None]
    if W.shape[0] != model.dim or Z.shape[-1] != model.dim:
        raise ValueError(f"observable/feature dimension mismatch with operator of dimension {model.dim}")
    return Z @ (model.E @ W)


def forecast_state(model: EvolutionOperatorModel, features, X) -> np.ndarray:
    """One-lag state forecast through the raw-state slots, in original units."""
    pred = forecast(model, features, X, state_observables(features))
    if hasattr(features, "denormalize"):
        pred = features.denormalize(pred)
    return pred


def linls_baseline(pairs, ridge: float = 1e-6) -> tuple[EvolutionOperatorModel, AffineFeatures]:
    """Least squares on the raw state plus an intercept column."""
    feats = AffineFeatures(pairs.dim)
    C_X, C_Y, C_XY = batch_covariances(feats(pairs.x), feats(pairs.y))
    model = least_squares_operator(C_X, C_XY, ridge, lag_time=pairs.dt_effective, C_Y=C_Y)
    return model, feats


def filter_spectrum(decomp: SpectralDecomposition, min_decorrelation: float) -> SpectralDecomposition:
    """Keep modes whose implied timescale is at least ``min_decorrelation``."""
    if min_decorrelation < 0:
        raise ValueError("min_decorrelation must be >= 0")
    keep = np.flatnonzero(decomp.timescales >= min_decorrelation)
    return SpectralDecomposition(decomp.eigenvalues[keep], decomp.Q[:, keep], decomp.Qinv[keep, :],
                                 decomp.lag_time)


def rmse(pred, target):
    """Aggregate and per-component root mean squared error."""
    err = np.asarray(pred) - np.asarray(target)
    return float(np.sqrt(np.mean(err ** 2))), np.sqrt(np.mean(err ** 2, axis=0))


def write_spectrum_csv(path, decomp: SpectralDecomposition) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["idx", "Re", "Im", "Abs", "decorrelation", "frequency"])
        for i, (lam, tau, f) in enumerate(zip(decomp.eigenvalues, decomp.timescales, decomp.frequencies), 1):
            w.writerow([i, repr(float(lam.real)), repr(float(lam.imag)), repr(float(abs(lam))),
                        repr(float(tau)), repr(float(f))])


def write_eigenfunction_csv(path, time_index, psi) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time_index", "re", "im"])
        for t, v in zip(time_index, psi):
            w.writerow([int(t), repr(float(np.real(v))), repr(float(np.imag(v)))])


def read_eigenfunction_csv(path):
    data = np.loadtxt(Path(path), delimiter=",", skiprows=1, ndmin=2)
    return data[:, 0].astype(int), data[:, 1] + 1j * data[:, 2]
