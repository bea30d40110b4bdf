"""Trajectory generators, lagged-pair datasets and trajectory file I/O.

Three built-in systems are provided: the Lorenz '63 attractor (RK4), the
Ornstein-Uhlenbeck process (exact transition sampling) and finite-state
Markov chains. Pair datasets store index pairs into a shared state buffer so
that changing the lag or history stacking never copies state vectors.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .exceptions import ConvergenceError, IntegrationDivergedError, TrajectoryFormatError

__all__ = [
    "Trajectory",
    "PairDataset",
    "lorenz63_trajectory",
    "ou_trajectory",
    "markov_chain_pairs",
    "markov_chain_trajectory",
    "stationary_distribution",
    "split_with_gaps",
    "make_pairs",
    "load_trajectory",
    "save_trajectory",
    "save_dataset",
    "load_dataset",
]

BINARY_MAGIC = b"EVOP"
BINARY_VERSION = 1
_HEADER = struct.Struct("<4sIIId")


@dataclass(frozen=True)
class Trajectory:
    """Time-ordered states of one system run.

    Attributes
    ----------
    states : ndarray, shape (n, dim)
        One row per time step; row ``i`` has time index ``start + i``.
    dt : float
        System time per step.
    meta : dict
        Generator name, parameters and seed.
    start : int
        Time index of the first row (nonzero for split segments).
    """

    states: np.ndarray
    dt: float = 1.0
    meta: dict = field(default_factory=dict)
    start: int = 0

    def __post_init__(self):
        states = np.asarray(self.states, dtype=np.float64)
        if states.ndim == 1:
            states = states[:, None]
        if states.ndim != 2:
            raise ValueError(f"states must be 2-D, got shape {states.shape}")
        if len(states) < 2:
            raise ValueError("a trajectory needs at least 2 states")
        if not np.all(np.isfinite(states)):
            row, col = np.argwhere(~np.isfinite(states))[0]
            raise ValueError(f"non-finite state value at row {row}, column {col}")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        states.flags.writeable = False
        object.__setattr__(self, "states", states)

    def __len__(self):
        return len(self.states)

    @property
    def dim(self) -> int:
        return self.states.shape[1]

    @property
    def time_index(self) -> np.ndarray:
        return np.arange(self.start, self.start + len(self.states))


@dataclass(frozen=True)
class PairDataset:
    """Lagged ``(x, y)`` pairs stored as row indices into a shared buffer.

    With ``history = H`` each sample is the concatenation of the ``H + 1``
    consecutive rows starting at its index.
    """

    states: np.ndarray
    x_index: np.ndarray
    y_index: np.ndarray
    lag: int = 1
    history: int = 0
    dt: float = 1.0

    def __post_init__(self):
        if len(self.x_index) != len(self.y_index):
            raise ValueError("x_index and y_index must have equal length")
        if len(self.x_index) == 0:
            raise ValueError("empty pair dataset")

    def __len__(self):
        return len(self.x_index)

    @property
    def dt_effective(self) -> float:
        return self.lag * self.dt

    @property
    def dim(self) -> int:
        return self.states.shape[1] * (self.history + 1)

    def _gather(self, index):
        if self.history == 0:
            return self.states[index]
        offsets = np.arange(self.history + 1)
        rows = self.states[np.asarray(index)[:, None] + offsets[None, :]]
        return rows.reshape(len(index), -1)

    @property
    def x(self) -> np.ndarray:
        return self._gather(self.x_index)

    @property
    def y(self) -> np.ndarray:
        return self._gather(self.y_index)

    def take(self, idx) -> tuple[np.ndarray, np.ndarray]:
        """Materialize the samples at positions ``idx``."""
        return self._gather(self.x_index[idx]), self._gather(self.y_index[idx])


def _lorenz_rk4(u, h, n, sigma, rho, beta):
    # scalar arithmetic; much faster than 3-element numpy arrays
    x, y, z = u

    def f(x, y, z):
        return sigma * (y - x), x * (rho - z) - y, x * y - beta * z

    h2 = 0.5 * h
    h6 = h / 6.0
    for _ in range(n):
        a1, b1, c1 = f(x, y, z)
        a2, b2, c2 = f(x + h2 * a1, y + h2 * b1, z + h2 * c1)
        a3, b3, c3 = f(x + h2 * a2, y + h2 * b2, z + h2 * c2)
        a4, b4, c4 = f(x + h * a3, y + h * b3, z + h * c3)
        x += h6 * (a1 + 2.0 * a2 + 2.0 * a3 + a4)
        y += h6 * (b1 + 2.0 * b2 + 2.0 * b3 + b4)
        z += h6 * (c1 + 2.0 * c2 + 2.0 * c3 + c4)
    return x, y, z


def lorenz63_trajectory(
    n_steps: int,
    dt: float = 0.01,
    x0: Sequence[float] = (1.0, 1.0, 1.0),
    sigma: float = 10.0,
    rho: float = 28.0,
    beta: float = 8.0 / 3.0,
    seed: int | None = None,
    jitter: float = 0.0,
    substeps: int = 10,
) -> Trajectory:
    """Integrate Lorenz '63 with fixed-step RK4.

    Each output step of length ``dt`` is made of ``substeps`` RK4 steps of
    length ``dt / substeps``. The returned trajectory holds ``n_steps + 1``
    states, the initial condition included. When ``jitter > 0`` the initial
    condition is perturbed by seeded uniform noise in ``[-jitter, jitter]^3``.
    """
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps}")
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if substeps < 1:
        raise ValueError(f"substeps must be >= 1, got {substeps}")
    u = np.array(x0, dtype=np.float64)
    if u.shape != (3,):
        raise ValueError("x0 must be a 3-vector")
    if jitter > 0:
        u = u + np.random.default_rng(seed).uniform(-jitter, jitter, size=3)
    out = np.empty((n_steps + 1, 3))
    out[0] = u
    state = tuple(float(v) for v in u)
    h = dt / substeps
    for i in range(1, n_steps + 1):
        state = _lorenz_rk4(state, h, substeps, sigma, rho, beta)
        if not all(math.isfinite(v) for v in state):
            raise IntegrationDivergedError(i, np.array(state))
        out[i] = state
    meta = dict(generator="lorenz63", sigma=sigma, rho=rho, beta=beta, dt=dt, substeps=substeps,
                x0=[float(v) for v in out[0]], seed=seed, jitter=jitter)
    return Trajectory(out, dt=dt, meta=meta)


def ou_trajectory(
    n_steps: int,
    dt: float = 0.1,
    theta: float = 1.0,
    sigma: float = 1.0,
    x0: float = 0.0,
    seed: int | None = None,
) -> Trajectory:
    """Sample a 1-D Ornstein-Uhlenbeck path with its exact transition kernel.

    ``x_{t+dt} = x_t exp(-theta dt) + xi`` with
    ``xi ~ N(0, sigma^2 (1 - exp(-2 theta dt)) / (2 theta))``. The transfer
    operator at lag ``k dt`` therefore has eigenvalues ``exp(-n theta k dt)``.
    """
    if not (theta > 0 and sigma > 0 and dt > 0):
        raise ValueError("theta, sigma and dt must all be positive")
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps}")
    rng = np.random.default_rng(seed)
    a = math.exp(-theta * dt)
    noise_std = sigma * math.sqrt((1.0 - a * a) / (2.0 * theta))
    xi = rng.normal(0.0, noise_std, size=n_steps)
    out = np.empty(n_steps + 1)
    out[0] = x0
    x = float(x0)
    for i in range(n_steps):
        x = a * x + xi[i]
        out[i + 1] = x
    meta = dict(generator="ou", theta=theta, sigma=sigma, x0=x0, seed=seed)
    return Trajectory(out[:, None], dt=dt, meta=meta)


def _check_stochastic(T):
    T = np.asarray(T, dtype=np.float64)
    if T.ndim != 2 or T.shape[0] != T.shape[1]:
        raise ValueError(f"transition matrix must be square, got shape {T.shape}")
    if np.any(T < 0):
        raise ValueError("transition matrix has negative entries")
    if np.any(np.abs(T.sum(axis=1) - 1.0) > 1e-12):
        raise ValueError("transition matrix rows must sum to 1")
    return T


def stationary_distribution(T, tol: float = 1e-14, max_iter: int = 100_000) -> np.ndarray:
    """Stationary distribution of a row-stochastic matrix by power iteration."""
    T = _check_stochastic(T)
    n = len(T)
    pi = np.full(n, 1.0 / n)
    for _ in range(max_iter):
        nxt = pi @ T
        if np.abs(nxt - pi).max() < tol:
            return nxt / nxt.sum()
        pi = nxt
    raise ConvergenceError(
        f"power iteration did not converge in {max_iter} iterations "
        "(chain may be reducible or periodic)")


def markov_chain_pairs(T, n_pairs: int, seed: int | None = None) -> PairDataset:
    """Sample ``(x, y)`` with ``x ~ pi`` and ``y ~ T(x, .)``, one-hot encoded.

    The state buffer is the identity matrix, so ``x_index`` / ``y_index``
    are the sampled chain states themselves.
    """
    T = _check_stochastic(T)
    pi = stationary_distribution(T)
    rng = np.random.default_rng(seed)
    n = len(T)
    x = rng.choice(n, size=n_pairs, p=pi)
    cdf = np.cumsum(T, axis=1)
    u = rng.random(n_pairs)
    y = (u[:, None] > cdf[x]).sum(axis=1)
    y = np.minimum(y, n - 1)
    return PairDataset(np.eye(n), x, y, lag=1, history=0, dt=1.0)


def markov_chain_trajectory(T, n_steps: int, seed: int | None = None, x0: int | None = None) -> Trajectory:
    """Simulate the chain for ``n_steps`` transitions; states are one-hot rows.

    The start state is drawn from the stationary distribution unless ``x0``
    is given.
    """
    T = _check_stochastic(T)
    n = len(T)
    rng = np.random.default_rng(seed)
    s = int(rng.choice(n, p=stationary_distribution(T))) if x0 is None else int(x0)
    cdf = np.cumsum(T, axis=1)
    u = rng.random(n_steps)
    path = np.empty(n_steps + 1, dtype=int)
    path[0] = s
    for i in range(n_steps):
        s = min(int(np.searchsorted(cdf[s], u[i], side="right")), n - 1)
        path[i + 1] = s
    meta = dict(generator="markov", transition_matrix=T.tolist(), seed=seed)
    return Trajectory(np.eye(n)[path], dt=1.0, meta=meta)


def split_with_gaps(traj: Trajectory, burn_in: int, sizes: Sequence[int], gap: int) -> list[Trajectory]:
    """Cut consecutive segments after a burn-in, dropping ``gap`` steps between them."""
    sizes = [int(s) for s in sizes]
    if burn_in < 0 or gap < 0 or any(s < 2 for s in sizes):
        raise ValueError("burn_in and gap must be >= 0 and sizes >= 2")
    required = burn_in + sum(sizes) + gap * (len(sizes) - 1)
    if required > len(traj):
        raise ValueError(f"trajectory too short: split needs {required} steps, {len(traj)} available")
    out = []
    pos = burn_in
    for s in sizes:
        out.append(Trajectory(traj.states[pos:pos + s], dt=traj.dt, meta=dict(traj.meta),
                              start=traj.start + pos))
        pos += s + gap
    return out


def make_pairs(traj: Trajectory, lag: int = 1, history: int = 0) -> PairDataset:
    """Lagged pairs within one contiguous trajectory.

    Sample ``i`` has ``x = concat(states[i:i+history+1])`` and
    ``y = concat(states[i+lag:i+lag+history+1])``.
    """
    if lag < 1 or history < 0:
        raise ValueError("lag must be >= 1 and history >= 0")
    n = len(traj) - lag - history
    if n < 1:
        raise ValueError(f"trajectory of length {len(traj)} too short for lag={lag}, history={history}")
    idx = np.arange(n)
    return PairDataset(traj.states, idx, idx + lag, lag=lag, history=history, dt=traj.dt)


# ---------------------------------------------------------------- file I/O

def _infer_format(path, fmt):
    if fmt is not None:
        return fmt
    return "csv" if Path(path).suffix.lower() == ".csv" else "binary"


def save_trajectory(traj: Trajectory, path, fmt: str | None = None) -> None:
    """Write ``traj`` as CSV (``x0,x1,...`` header) or EVOP binary."""
    fmt = _infer_format(path, fmt)
    path = Path(path)
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{j}" for j in range(traj.dim)])
            for row in traj.states:
                w.writerow([repr(float(v)) for v in row])
    elif fmt == "binary":
        n, d = traj.states.shape
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(BINARY_MAGIC, BINARY_VERSION, n, d, float(traj.dt)))
            fh.write(np.ascontiguousarray(traj.states, dtype="<f8").tobytes())
    else:
        raise ValueError(f"unknown trajectory format {fmt!r}")


def load_trajectory(path, fmt: str | None = None, dt: float = 1.0) -> Trajectory:
    """Read a trajectory written by :func:`save_trajectory` (or by hand, for CSV).

    CSV files carry no time step, so ``dt`` is taken from the argument.
    """
    fmt = _infer_format(path, fmt)
    if fmt == "csv":
        states = _read_csv(path)
    elif fmt == "binary":
        states, dt = _read_binary(path)
    else:
        raise ValueError(f"unknown trajectory format {fmt!r}")
    return Trajectory(states, dt=dt, meta=dict(source=str(path)))


def _read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise TrajectoryFormatError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if not header or len(set(header)) != len(header) or any(not h for h in header):
        raise TrajectoryFormatError(f"{path}: malformed header {rows[0]!r}")
    try:
        [float(h) for h in header]
    except ValueError:
        pass
    else:
        raise TrajectoryFormatError(f"{path}: first row is numeric, expected a header naming columns")
    d = len(header)
    data = np.empty((len(rows) - 1, d))
    for i, row in enumerate(rows[1:], start=1):
        if len(row) != d:
            raise TrajectoryFormatError(f"{path}: row {i} has {len(row)} columns, header has {d}")
        for j, cell in enumerate(row):
            try:
                v = float(cell)
            except ValueError:
                raise TrajectoryFormatError(f"{path}: row {i}, column {j} ({header[j]}): "
                                            f"cannot parse {cell!r}") from None
            if not math.isfinite(v):
                raise TrajectoryFormatError(f"{path}: non-finite value at row {i}, column {j} ({header[j]})")
            data[i - 1, j] = v
    if len(data) < 2:
        raise TrajectoryFormatError(f"{path}: need at least 2 rows, found {len(data)}")
    return data


def _read_binary(path):
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise TrajectoryFormatError(f"{path}: truncated header")
    magic, version, n, d, dt = _HEADER.unpack_from(raw)
    if magic != BINARY_MAGIC:
        raise TrajectoryFormatError(f"{path}: bad magic {magic!r}")
    if version != BINARY_VERSION:
        raise TrajectoryFormatError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + 8 * n * d
    if len(raw) != expected:
        raise TrajectoryFormatError(f"{path}: payload size mismatch, header says {n}x{d} "
                                    f"({expected} bytes), file has {len(raw)}")
    data = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).reshape(n, d).astype(np.float64)
    bad = np.argwhere(~np.isfinite(data))
    if len(bad):
        raise TrajectoryFormatError(f"{path}: non-finite value at row {bad[0][0]}, column {bad[0][1]}")
    return data, dt


def save_dataset(pairs: PairDataset, path) -> None:
    """Save a pair dataset (state buffer plus index pairs) as ``.npz``."""
    np.savez(path, states=pairs.states, x_index=pairs.x_index, y_index=pairs.y_index,
             lag=pairs.lag, history=pairs.history, dt=pairs.dt)


def load_dataset(path) -> PairDataset:
    with np.load(path) as f:
        return PairDataset(f["states"], f["x_index"], f["y_index"], lag=int(f["lag"]),
                           history=int(f["history"]), dt=float(f["dt"]))
