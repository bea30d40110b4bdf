"""Static figures written next to the CSV outputs of the CLI."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}

# no timestamps or version strings, so reruns give identical files
_META = {"Software": None}


def _save(fig, path):
    fig.savefig(path, metadata=_META)
    plt.close(fig)


def spectrum_figure(path, eigenvalues, title=None):
    """Eigenvalues in the complex plane with the unit circle."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(3.4, 3.4))
        t = np.linspace(0, 2 * np.pi, 400)
        ax.plot(np.cos(t), np.sin(t), color="0.7", lw=0.8)
        lam = np.asarray(eigenvalues)
        ax.scatter(lam.real, lam.imag, s=18, c=np.abs(lam), cmap="viridis", vmin=0, vmax=1, zorder=3)
        for i, l in enumerate(lam, 1):
            ax.annotate(str(i), (l.real, l.imag), textcoords="offset points", xytext=(3, 3), fontsize=6)
        ax.set_aspect("equal")
        ax.set_xlabel("Re")
        ax.set_ylabel("Im")
        if title:
            ax.set_title(title)
        _save(fig, path)


def eigenfunction_figure(path, states, psi, mode_label="", coords=(0, 2)):
    """Real part of an eigenfunction along a trajectory.

    For states of dimension >= 2 the trajectory is drawn in the ``coords``
    projection and colored by ``Re psi``; otherwise ``Re psi`` is plotted
    against the state.
    """
    states = np.asarray(states)
    values = np.real(psi)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(3.6, 3.0))
        if states.shape[1] >= 2:
            i, j = coords if max(coords) < states.shape[1] else (0, 1)
            sc = ax.scatter(states[:, i], states[:, j], c=values, s=3, cmap="coolwarm", linewidths=0)
            fig.colorbar(sc, ax=ax, label=f"Re $\\Psi_{{{mode_label}}}$")
            ax.set_xlabel(f"$x_{i}$")
            ax.set_ylabel(f"$x_{j}$")
        else:
            order = np.argsort(states[:, 0])
            ax.plot(states[order, 0], values[order], lw=1)
            ax.set_xlabel("$x$")
            ax.set_ylabel(f"Re $\\Psi_{{{mode_label}}}$")
        _save(fig, path)


def lasso_path_figure(path, lasso):
    """Coefficient paths and MSE against the penalty."""
    with plt.rc_context(RC):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(6.8, 2.8))
        lam = lasso.lambdas
        pos = lam > 0
        for j, name in enumerate(lasso.names):
            a1.plot(lam[pos], lasso.coefficients[pos, j], lw=1, label=name)
        a1.set_xscale("log")
        a1.set_xlabel(r"$\lambda$")
        a1.set_ylabel("coefficient")
        if len(lasso.names) <= 10:
            a1.legend(frameon=False)
        a2.plot(lasso.n_active, lasso.mse, marker="o", ms=3, lw=1)
        a2.set_xlabel("active descriptors")
        a2.set_ylabel("MSE")
        _save(fig, path)


def training_figure(path, report):
    with plt.rc_context(RC):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(6.8, 2.8))
        ep = np.arange(1, len(report.train_loss) + 1)
        a1.plot(ep, report.train_loss, lw=1, label="train")
        a1.plot(ep, report.val_loss, lw=1, label="validation")
        a1.set_xlabel("epoch")
        a1.set_ylabel("loss")
        a1.legend(frameon=False)
        a2.plot(ep, report.val_vamp2, lw=1)
        a2.set_xlabel("epoch")
        a2.set_ylabel("validation VAMP-2")
        _save(fig, path)
