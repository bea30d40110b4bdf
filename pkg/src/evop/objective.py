"""Contrastive density-ratio loss, its covariance form and the VAMP-2 score."""

from __future__ import annotations

import numpy as np

from .exceptions import NotPSDError

__all__ = [
    "score_matrix",
    "contrastive_loss",
    "contrastive_loss_and_grad",
    "analytic_loss",
    "analytic_loss_grad",
    "vamp2_score",
]


def score_matrix(Z, Q) -> np.ndarray:
    """Bilinear scores ``r_ij = <z_i, q_j>``."""
    return np.asarray(Z) @ np.asarray(Q).T


def _check_batch(Z, Q):
    Z = np.asarray(Z, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    if Z.shape != Q.shape or Z.ndim != 2:
        raise ValueError(f"Z and Q must be equal-shape matrices, got {Z.shape} and {Q.shape}")
    if len(Z) < 2:
        raise ValueError("the U-statistic needs a batch of at least 2 pairs")
    return Z, Q


def contrastive_loss(Z, Q) -> float:
    r"""Empirical contrastive loss of a batch.

    .. math::
        \frac{1}{B(B-1)} \sum_{i \neq j} r_{ij}^2 - \frac{2}{B} \sum_i r_{ii}

    where ``r = Z Q^T``. Off-diagonal pairs estimate the product-of-marginals
    expectation; the diagonal holds the positive (true-transition) pairs.
    """
    Z, Q = _check_batch(Z, Q)
    B = len(Z)
    r = Z @ Q.T
    diag = np.diagonal(r)
    off = (r * r).sum() - (diag * diag).sum()
    return float(off / (B * (B - 1)) - 2.0 * diag.sum() / B)


def contrastive_loss_and_grad(Z, Q):
    """Loss together with ``dL/dZ`` and ``dL/dQ``."""
    Z, Q = _check_batch(Z, Q)
    B = len(Z)
    r = Z @ Q.T
    G = (2.0 / (B * (B - 1))) * r
    np.fill_diagonal(G, -2.0 / B)
    diag = np.diagonal(r)
    loss = ((r * r).sum() - (diag * diag).sum()) / (B * (B - 1)) - 2.0 * diag.sum() / B
    return float(loss), G @ Q, G.T @ Z


def analytic_loss(C_X, C_Y, C_XY, P) -> float:
    """Population loss in covariance form, ``Tr(P^T C_X P C_Y) - 2 Tr(P C_XY^T)``."""
    C_X, C_Y, C_XY, P = (np.asarray(a, dtype=np.float64) for a in (C_X, C_Y, C_XY, P))
    d = C_X.shape[0]
    for name, a in (("C_X", C_X), ("C_Y", C_Y), ("C_XY", C_XY), ("P", P)):
        if a.shape != (d, d):
            raise ValueError(f"{name} has shape {a.shape}, expected {(d, d)}")
    return float(np.trace(P.T @ C_X @ P @ C_Y) - 2.0 * np.sum(P * C_XY))


def analytic_loss_grad(C_X, C_Y, C_XY, P) -> np.ndarray:
    """Gradient of :func:`analytic_loss` in ``P`` for symmetric ``C_X``, ``C_Y``."""
    return 2.0 * (C_X @ P @ C_Y - C_XY)


def _inv_sqrt(C, reg, name):
    C = 0.5 * (C + C.T)
    w, V = np.linalg.eigh(C)
    if w.min() < -1e-10:
        raise NotPSDError(f"{name} is not positive semidefinite (min eigenvalue {w.min():.3e})")
    w = np.maximum(w + reg, max(reg, 1e-12))
    return (V / np.sqrt(w)) @ V.T


def vamp2_score(C_X, C_XY, C_Y, reg: float = 0.0) -> float:
    """Squared Frobenius norm of the whitened cross-covariance.

    Inverse square roots come from symmetric eigendecompositions of
    ``C + reg I`` with eigenvalues clamped at ``max(reg, 1e-12)``.
    """
    if reg < 0:
        raise ValueError("reg must be >= 0")
    C_X, C_XY, C_Y = (np.asarray(a, dtype=np.float64) for a in (C_X, C_XY, C_Y))
    K = _inv_sqrt(C_X, reg, "C_X") @ C_XY @ _inv_sqrt(C_Y, reg, "C_Y")
    return float(np.sum(K * K))
