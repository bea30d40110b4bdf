"""Contrastive training loop: AdamW, cosine schedule and EMA covariance buffers."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .encoder import Encoder, EncoderConfig, gradient, init_params, load_checkpoint, save_checkpoint
from .exceptions import NonFiniteError
from .objective import vamp2_score
from .operator import (CovarianceBuffers, EvolutionOperatorModel, batch_covariances,
                       least_squares_operator)

logger = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "TrainReport",
    "TrainState",
    "TrainingAborted",
    "cosine_lr",
    "AdamW",
    "clip_grad_norm",
    "train",
    "finalize_operator",
    "embed",
    "dataset_loss",
    "save_state",
    "load_state",
]


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 512
    lr_max: float = 1e-3
    lr_min: float = 1e-4
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip_norm: float | None = None
    ema_rate: float = 0.01
    seed: int = 0
    val_interval: int = 1
    ridge: float = 1e-6
    vamp_reg: float = 1e-6

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (the loss is a U-statistic over pairs)")
        if not 0 < self.lr_min <= self.lr_max:
            raise ValueError("need 0 < lr_min <= lr_max")
        if self.epochs < 1 or self.val_interval < 1:
            raise ValueError("epochs and val_interval must be >= 1")
        if self.grad_clip_norm is not None and self.grad_clip_norm <= 0:
            raise ValueError("grad_clip_norm must be positive")


def cosine_lr(step: int, total: int, lr_max: float, lr_min: float) -> float:
    if total <= 0:
        return lr_max
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total))


class AdamW:
    """Adam with decoupled weight decay applied to selected parameters.

    ``decay_mask[k]`` says whether parameter ``k`` is decayed.
    """

    def __init__(self, shapes, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0, decay_mask=None):
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.decay_mask = list(decay_mask) if decay_mask is not None else [True] * len(shapes)
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params, grads, lr, names=None):
        """Update ``params`` in place."""
        for k, g in enumerate(grads):
            if not np.isfinite(g).all():
                name = names[k] if names else str(k)
                raise NonFiniteError(f"non-finite gradient for parameter {name}")
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v, decay in zip(params, grads, self.m, self.v, self.decay_mask):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if decay and self.weight_decay:
                upd = upd + self.weight_decay * p
            p -= lr * upd

    def state_dict(self):
        return dict(t=self.t, m=[a.tolist() for a in self.m], v=[a.tolist() for a in self.v])

    def load_state_dict(self, d):
        self.t = int(d["t"])
        self.m = [np.array(a, dtype=np.float64).reshape(m.shape) for a, m in zip(d["m"], self.m)]
        self.v = [np.array(a, dtype=np.float64).reshape(v.shape) for a, v in zip(d["v"], self.v)]


def clip_grad_norm(grads, max_norm: float):
    """Rescale ``grads`` in place so the global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if total > max_norm:
        s = max_norm / (total + 1e-12)
        for g in grads:
            g *= s
    return total


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_vamp2: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    wall_time: list[float] = field(default_factory=list)
    best_epoch: int | None = None
    best_val_vamp2: float | None = None
    checkpoint_path: str | None = None

    def records(self, start_epoch: int = 0):
        for k in range(len(self.train_loss)):
            yield dict(epoch=start_epoch + k + 1, train_loss=self.train_loss[k], val_loss=self.val_loss[k],
                       val_vamp2=self.val_vamp2[k], lr=self.lr[k], wall_time=self.wall_time[k])


@dataclass
class TrainState:
    """Everything needed to continue training bit-identically."""

    encoder: Encoder
    P: np.ndarray
    buffers: CovarianceBuffers
    optimizer: AdamW
    epoch: int = 0
    step: int = 0
    best: tuple | None = None  # (epoch, vamp2, encoder, P, buffers)

    @property
    def params(self):
        return self.encoder.params + [self.P]

    @property
    def names(self):
        return self.encoder.param_names + ["P"]


class TrainingAborted(RuntimeError):
    def __init__(self, message, state: TrainState, report: TrainReport):
        super().__init__(message)
        self.state = state
        self.report = report


def new_state(enc_config: EncoderConfig, config: TrainConfig) -> TrainState:
    encoder, P = init_params(enc_config)
    # weight decay on weight matrices only, not biases or P
    mask = [name.startswith("W") for name in encoder.param_names] + [False]
    opt = AdamW([p.shape for p in encoder.params + [P]], betas=config.betas, eps=config.eps,
                weight_decay=config.weight_decay, decay_mask=mask)
    return TrainState(encoder, P, CovarianceBuffers(enc_config.output_dim, config.ema_rate), opt)


def embed(encoder, X, chunk: int = 8192) -> np.ndarray:
    return np.concatenate([encoder(X[i:i + chunk]) for i in range(0, len(X), chunk)], axis=0)


def dataset_loss(Zx, Zy, P) -> float:
    """Contrastive loss over a whole dataset without forming the N x N score matrix.

    Uses ``sum_ij r_ij^2 = N^2 Tr(P^T C_X P C_Y)`` with uncentered covariances.
    """
    n = len(Zx)
    Q = Zy @ P.T
    diag = np.einsum("ij,ij->i", Zx, Q)
    C_X, C_Q = Zx.T @ Zx, Q.T @ Q
    total = float(np.sum(C_X * C_Q))
    return (total - float(diag @ diag)) / (n * (n - 1)) - 2.0 * float(diag.mean())


def _batches(n, batch_size, seed, epoch):
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    out = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(out[-1]) < 2:
        out.pop()
    return out


def _steps_per_epoch(n, batch_size):
    full, rem = divmod(n, batch_size)
    return full + (1 if rem >= 2 else 0)


def train(enc_config: EncoderConfig, pairs, val_pairs, config: TrainConfig,
          state: TrainState | None = None, metrics_path=None, checkpoint_path=None,
          until_epoch: int | None = None):
    """Fit encoder and predictor with the contrastive loss.

    Returns ``(state, report)``; ``state.encoder``, ``state.P`` and
    ``state.buffers`` are the trained model. Pass a previous ``state`` to
    resume; epochs are counted from ``state.epoch``. Given
    ``checkpoint_path`` the last good state is written after every epoch.
    ``until_epoch`` stops early without changing the learning-rate schedule,
    which is still laid out over ``config.epochs``.
    """
    n = len(pairs)
    if n < 2 or len(val_pairs) < 2:
        raise ValueError("training and validation sets need at least 2 pairs each")
    if config.batch_size > n:
        raise ValueError(f"batch_size={config.batch_size} exceeds dataset size {n}")
    if state is None:
        state = new_state(enc_config, config)
    report = TrainReport()
    total = config.epochs * _steps_per_epoch(n, config.batch_size)
    Xv, Yv = val_pairs.x, val_pairs.y
    t0 = time.perf_counter()
    metrics_fh = open(metrics_path, "a") if metrics_path else None
    try:
        stop = config.epochs if until_epoch is None else min(until_epoch, config.epochs)
        while state.epoch < stop:
            losses = []
            lr = None
            for idx in _batches(n, config.batch_size, config.seed, state.epoch):
                xb, yb = pairs.take(idx)
                lr = cosine_lr(state.step, total, config.lr_max, config.lr_min)
                try:
                    loss, genc, dP, (Zx, Zy) = gradient(state.encoder, state.P, xb, yb,
                                                        return_embeddings=True)
                    grads = genc + [dP]
                    if config.grad_clip_norm is not None:
                        clip_grad_norm(grads, config.grad_clip_norm)
                    state.optimizer.step(state.params, grads, lr, state.names)
                except NonFiniteError as exc:
                    raise TrainingAborted(f"epoch {state.epoch + 1}, step {state.step}: {exc}",
                                          state, report) from exc
                state.buffers.update(*batch_covariances(Zx, Zy))
                losses.append(loss)
                state.step += 1
            state.epoch += 1
            report.train_loss.append(float(np.mean(losses)))
            report.lr.append(lr)
            if state.epoch % config.val_interval == 0 or state.epoch == config.epochs:
                Zx, Zy = embed(state.encoder, Xv), embed(state.encoder, Yv)
                vl = dataset_loss(Zx, Zy, state.P)
                C_X, C_Y, C_XY = batch_covariances(Zx, Zy)
                vs = vamp2_score(C_X, C_XY, C_Y, config.vamp_reg)
                if state.best is None or vs > state.best[1]:
                    state.best = (state.epoch, vs, state.encoder.copy(), state.P.copy(), state.buffers.copy())
            else:
                vl, vs = math.nan, math.nan
            report.val_loss.append(vl)
            report.val_vamp2.append(vs)
            report.wall_time.append(time.perf_counter() - t0)
            logger.info("epoch %d loss %.6g val_loss %.6g val_vamp2 %.6g lr %.3g", state.epoch,
                        report.train_loss[-1], vl, vs, lr)
            if metrics_fh:
                rec = next(report.records(state.epoch - 1))
                metrics_fh.write(json.dumps(rec) + "\n")
                metrics_fh.flush()
            if checkpoint_path:
                save_state(checkpoint_path, state, config)
    finally:
        if metrics_fh:
            metrics_fh.close()
    if state.best is not None:
        report.best_epoch, report.best_val_vamp2 = state.best[0], state.best[1]
    report.checkpoint_path = str(checkpoint_path) if checkpoint_path else None
    return state, report


def finalize_operator(buffers: CovarianceBuffers | None, ridge: float = 1e-6, mode: str = "buffers",
                      pairs=None, encoder=None, lag_time: float | None = None) -> EvolutionOperatorModel:
    """Least-squares operator from EMA buffers or from a fresh full-data pass."""
    if mode == "buffers":
        if buffers is None or buffers.update_count < 1:
            raise ValueError("covariance buffers are empty; train first or use mode='full_pass'")
        C_X, C_Y, C_XY = buffers.C_X, buffers.C_Y, buffers.C_XY
        source = "ema_buffers"
    elif mode == "full_pass":
        if pairs is None or encoder is None:
            raise ValueError("full_pass mode needs a dataset and an encoder")
        C_X, C_Y, C_XY = batch_covariances(embed(encoder, pairs.x), embed(encoder, pairs.y))
        source = "full_pass"
    else:
        raise ValueError(f"unknown mode {mode!r}")
    if lag_time is None:
        lag_time = pairs.dt_effective if pairs is not None else 1.0
    return least_squares_operator(C_X, C_XY, ridge, lag_time=lag_time, source=source, C_Y=C_Y)


def save_state(path, state: TrainState, config: TrainConfig) -> None:
    extra = dict(epoch=state.epoch, step=state.step, optimizer=state.optimizer.state_dict(),
                 train_config=asdict(config))
    save_checkpoint(path, state.encoder, state.P, state.buffers, extra)


def load_state(path) -> tuple[TrainState, TrainConfig]:
    encoder, P, buffers, extra = load_checkpoint(path)
    config = TrainConfig(**extra["train_config"])
    state = new_state(encoder.config, config)
    state.encoder, state.P = encoder, P
    if buffers is not None:
        state.buffers = buffers
    state.optimizer.load_state_dict(extra["optimizer"])
    state.epoch, state.step = int(extra["epoch"]), int(extra["step"])
    return state, config
