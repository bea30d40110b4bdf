"""MLP encoder with optional simplicial normalization and raw-state passthrough.

The encoder maps a state ``x`` to ``phi(x) = [simnorm(MLP(x)), x]`` (each
part optional) and the linear predictor ``P`` acts on embeddings. Gradients
are computed by hand-written layer-local backward rules; the architecture is
fixed, so no general autodiff graph is needed.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .exceptions import NonFiniteError

__all__ = [
    "EncoderConfig",
    "Encoder",
    "init_params",
    "encoder_forward",
    "simplicial_normalize",
    "predictor_apply",
    "gradient",
    "save_checkpoint",
    "load_checkpoint",
]

ACTIVATIONS = ("relu", "tanh", "gelu")
CHECKPOINT_VERSION = 1


@dataclass
class EncoderConfig:
    input_dim: int
    hidden_dims: list[int] = field(default_factory=lambda: [16, 16])
    latent_dim: int = 8
    activation: str = "relu"
    append_raw_state: bool = False
    simnorm_group: int = 0
    seed: int = 0
    input_mean: list[float] | None = None
    input_scale: list[float] | None = None

    def __post_init__(self):
        self.hidden_dims = [int(h) for h in self.hidden_dims]
        if self.input_dim < 1 or self.latent_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ValueError("all layer dimensions must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.simnorm_group < 0:
            raise ValueError("simnorm_group must be >= 0")
        for name in ("input_mean", "input_scale"):
            v = getattr(self, name)
            if v is not None:
                v = [float(a) for a in np.ravel(v)]
                if len(v) != self.input_dim:
                    raise ValueError(f"{name} has length {len(v)}, expected {self.input_dim}")
                setattr(self, name, v)
        if self.input_scale is not None and min(self.input_scale) <= 0:
            raise ValueError("input_scale entries must be positive")
        if self.simnorm_group and self.latent_dim % self.simnorm_group:
            raise ValueError(f"simnorm_group={self.simnorm_group} does not divide latent_dim={self.latent_dim}")

    @property
    def output_dim(self) -> int:
        return self.latent_dim + (self.input_dim if self.append_raw_state else 0)

    @property
    def layer_dims(self) -> list[int]:
        return [self.input_dim, *self.hidden_dims, self.latent_dim]


# -- activations: (forward, derivative w.r.t. pre-activation)

def _gelu(a):
    return 0.5 * a * (1.0 + np.tanh(_GELU_C * (a + 0.044715 * a ** 3)))


def _gelu_grad(a):
    u = _GELU_C * (a + 0.044715 * a ** 3)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3 * 0.044715 * a ** 2)
    return 0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * du


_GELU_C = np.sqrt(2.0 / np.pi)

_ACT = {
    "relu": (lambda a: np.maximum(a, 0.0), lambda a: (a > 0).astype(a.dtype)),
    "tanh": (np.tanh, lambda a: 1.0 - np.tanh(a) ** 2),
    "gelu": (_gelu, _gelu_grad),
}


def simplicial_normalize(v, group_size: int) -> np.ndarray:
    """Softmax over consecutive groups of ``group_size`` entries (last axis)."""
    v = np.asarray(v, dtype=np.float64)
    if group_size < 1 or v.shape[-1] % group_size:
        raise ValueError(f"group size {group_size} does not divide length {v.shape[-1]}")
    g = v.reshape(*v.shape[:-1], -1, group_size)
    g = np.exp(g - g.max(axis=-1, keepdims=True))
    g /= g.sum(axis=-1, keepdims=True)
    return g.reshape(v.shape)


def _simnorm_backward(s, ds, group_size):
    # softmax Jacobian-vector product per group
    shp = s.shape
    s = s.reshape(*shp[:-1], -1, group_size)
    ds = ds.reshape(s.shape)
    out = s * (ds - (ds * s).sum(axis=-1, keepdims=True))
    return out.reshape(shp)


class Encoder:
    """Encoder parameters together with their configuration.

    ``weights[k]`` has shape ``(fan_in, fan_out)``; a layer computes
    ``h @ W + b``. The last layer is linear (no activation).
    """

    def __init__(self, config: EncoderConfig, weights, biases):
        self.config = config
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        dims = config.layer_dims
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[k], dims[k + 1]) or b.shape != (dims[k + 1],):
                raise ValueError(f"layer {k}: parameter shapes {w.shape}, {b.shape} "
                                 f"do not match config {dims[k]}->{dims[k + 1]}")

    @property
    def params(self) -> list[np.ndarray]:
        """Flat parameter list ``[W0, b0, W1, b1, ...]`` (arrays are shared, not copied)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @property
    def param_names(self) -> list[str]:
        names = []
        for k in range(len(self.weights)):
            names += [f"W{k}", f"b{k}"]
        return names

    def copy(self) -> "Encoder":
        return Encoder(self.config, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def __call__(self, X) -> np.ndarray:
        return self.forward(X)[0]

    def normalize(self, X) -> np.ndarray:
        """Fixed input standardization (identity when not configured)."""
        cfg = self.config
        if cfg.input_mean is not None:
            X = X - np.asarray(cfg.input_mean)
        if cfg.input_scale is not None:
            X = X / np.asarray(cfg.input_scale)
        return X

    def denormalize(self, X) -> np.ndarray:
        cfg = self.config
        if cfg.input_scale is not None:
            X = X * np.asarray(cfg.input_scale)
        if cfg.input_mean is not None:
            X = X + np.asarray(cfg.input_mean)
        return X

    def forward(self, X):
        """Embed a batch ``X`` of shape (B, input_dim); returns ``(Z, cache)``."""
        cfg = self.config
        X = np.asarray(X, dtype=np.float64)
        squeeze = X.ndim == 1
        if squeeze:
            X = X[None, :]
        if X.shape[-1] != cfg.input_dim:
            raise ValueError(f"input has dimension {X.shape[-1]}, encoder expects {cfg.input_dim}")
        X = self.normalize(X)
        act, _ = _ACT[cfg.activation]
        pre = []
        h = X
        inputs = [X]
        n = len(self.weights)
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            a = h @ w + b
            if k < n - 1:
                pre.append(a)
                h = act(a)
                inputs.append(h)
            else:
                h = a
        if cfg.simnorm_group:
            h = simplicial_normalize(h, cfg.simnorm_group)
        Z = np.concatenate([h, X], axis=1) if cfg.append_raw_state else h
        cache = (inputs, pre, h)
        return (Z[0] if squeeze else Z), cache

    def backward(self, cache, dZ) -> list[np.ndarray]:
        """Gradients ``[dW0, db0, ...]`` given ``dL/dZ`` for the batch in ``cache``."""
        cfg = self.config
        inputs, pre, learned = cache
        dh = np.asarray(dZ)[:, :cfg.latent_dim]
        if cfg.simnorm_group:
            dh = _simnorm_backward(learned, dh, cfg.simnorm_group)
        _, dact = _ACT[cfg.activation]
        grads = [None] * (2 * len(self.weights))
        for k in range(len(self.weights) - 1, -1, -1):
            grads[2 * k] = inputs[k].T @ dh
            grads[2 * k + 1] = dh.sum(axis=0)
            if k > 0:
                dh = (dh @ self.weights[k].T) * dact(pre[k - 1])
        return grads


def init_params(config: EncoderConfig) -> tuple[Encoder, np.ndarray]:
    """Seeded uniform init in ``+-sqrt(6/fan_in)``, zero biases, identity predictor."""
    rng = np.random.default_rng(config.seed)
    dims = config.layer_dims
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return Encoder(config, weights, biases), np.eye(config.output_dim)


def encoder_forward(encoder: Encoder, x) -> np.ndarray:
    return encoder(x)


def predictor_apply(P, z) -> np.ndarray:
    """``q = P z``; ``z`` may be a single embedding or a batch of rows."""
    P = np.asarray(P)
    z = np.asarray(z)
    if P.ndim != 2 or P.shape[0] != P.shape[1] or P.shape[1] != z.shape[-1]:
        raise ValueError(f"predictor shape {P.shape} incompatible with embedding dim {z.shape[-1]}")
    return z @ P.T


def gradient(encoder: Encoder, P, x_batch, y_batch, loss_fn: Callable | None = None,
             return_embeddings: bool = False):
    """Loss and exact gradients for one batch.

    ``loss_fn(Z, Q)`` must return ``(loss, dZ, dQ)``; it defaults to the
    contrastive loss. Returns ``(loss, encoder_grads, dP)``, plus the
    embeddings ``(Zx, Zy)`` when ``return_embeddings`` is set.
    """
    if loss_fn is None:
        from .objective import contrastive_loss_and_grad as loss_fn
    if len(x_batch) == 0:
        raise ValueError("empty batch")
    Zx, cache_x = encoder.forward(x_batch)
    Zy, cache_y = encoder.forward(y_batch)
    Q = Zy @ P.T
    loss, dZ, dQ = loss_fn(Zx, Q)
    if not np.isfinite(loss):
        raise NonFiniteError(f"non-finite loss {loss}")
    dP = dQ.T @ Zy
    dZy = dQ @ P
    gx = encoder.backward(cache_x, dZ)
    gy = encoder.backward(cache_y, dZy)
    grads = [a + b for a, b in zip(gx, gy)]
    if return_embeddings:
        return float(loss), grads, dP, (Zx, Zy)
    return float(loss), grads, dP


# ---------------------------------------------------------------- checkpoints

def _arr(a):
    return np.asarray(a, dtype=np.float64).tolist()


def save_checkpoint(path, encoder: Encoder, P, buffers=None, extra: dict | None = None) -> None:
    """JSON checkpoint; floats are written with ``repr`` so reloading is exact."""
    doc = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(encoder.config),
        "weights": [_arr(w) for w in encoder.weights],
        "biases": [_arr(b) for b in encoder.biases],
        "P": _arr(P),
    }
    if buffers is not None:
        doc["buffers"] = buffers.to_dict()
    if extra:
        doc["extra"] = extra
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path):
    """Returns ``(encoder, P, buffers_or_None, extra_dict)``."""
    from .operator import CovarianceBuffers

    doc = json.loads(Path(path).read_text())
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    config = EncoderConfig(**doc["config"])
    enc = Encoder(config, [np.array(w) for w in doc["weights"]], [np.array(b) for b in doc["biases"]])
    buffers = CovarianceBuffers.from_dict(doc["buffers"]) if "buffers" in doc else None
    return enc, np.array(doc["P"], dtype=np.float64), buffers, doc.get("extra", {})
