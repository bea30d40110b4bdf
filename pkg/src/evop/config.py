"""Run configuration: one YAML document with a section per pipeline stage.

Every key is optional; missing keys take the defaults below (the Lorenz '63
protocol). Unknown keys are rejected before any computation starts.

.. code-block:: yaml

    preset: lorenz63          # lorenz63 | ou | markov; fills defaults first
    dynamics:
      system: lorenz63        # lorenz63 | ou | markov
      n_steps: 15000
      dt: 0.01
      seed: 0
      params: {sigma: 10.0, rho: 28.0, beta: 2.6666666666666665}
      x0: [1.0, 1.0, 1.0]
      jitter: 0.5
      substeps: 10            # RK4 substeps per output step (lorenz63)
      burn_in: 1000
      splits: [10000, 1000, 1000]   # train / validation / test
      gap: 1000
      format: binary          # binary | csv
    encoder:
      hidden_dims: [16, 16]
      latent_dim: 8
      activation: relu        # relu | tanh | gelu
      append_raw_state: true
      simnorm_group: 0
      standardize: true       # fixed input standardization from training data
    training: {epochs: 100, batch_size: 512, lr_max: 0.001, lr_min: 0.0001, ...}
    operator:
      lag: 10
      history: 0
      ridge: 1.0e-6
      mode: buffers           # buffers | full_pass
    spectral:
      min_decorrelation: 0.0
      n_modes: 4
    interpret:
      descriptors: [coordinates, products, squares]
      mode: 1                 # eigenfunction index (0-based)
      target: real            # real | modulus
      n_lambdas: 50
      lambda_min_ratio: 1.0e-4
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .exceptions import ConfigError
from .training import TrainConfig

__all__ = ["RunConfig", "load_config", "PRESETS"]


@dataclass
class DynamicsSection:
    system: str = "lorenz63"
    n_steps: int = 15000
    dt: float = 0.01
    seed: int = 0
    params: dict = field(default_factory=lambda: dict(sigma=10.0, rho=28.0, beta=8.0 / 3.0))
    x0: list | float | int | None = field(default_factory=lambda: [1.0, 1.0, 1.0])
    jitter: float = 0.5
    substeps: int = 10
    burn_in: int = 1000
    splits: list[int] = field(default_factory=lambda: [10000, 1000, 1000])
    gap: int = 1000
    format: str = "binary"


@dataclass
class EncoderSection:
    hidden_dims: list[int] = field(default_factory=lambda: [16, 16])
    latent_dim: int = 8
    activation: str = "relu"
    append_raw_state: bool = True
    simnorm_group: int = 0
    standardize: bool = True


@dataclass
class OperatorSection:
    lag: int = 10
    history: int = 0
    ridge: float = 1e-6
    mode: str = "buffers"


@dataclass
class SpectralSection:
    min_decorrelation: float = 0.0
    n_modes: int = 4


@dataclass
class InterpretSection:
    descriptors: list[str] = field(default_factory=lambda: ["coordinates", "products", "squares"])
    mode: int = 1
    target: str = "real"
    n_lambdas: int = 50
    lambda_min_ratio: float = 1e-4


_SECTIONS = {
    "dynamics": DynamicsSection,
    "encoder": EncoderSection,
    "training": TrainConfig,
    "operator": OperatorSection,
    "spectral": SpectralSection,
    "interpret": InterpretSection,
}

_SYSTEM_PARAMS = {
    "lorenz63": {"sigma", "rho", "beta"},
    "ou": {"theta", "sigma"},
    "markov": {"transition_matrix"},
}

PRESETS = {
    "lorenz63": {},
    "ou": {
        "dynamics": dict(system="ou", n_steps=50000, dt=0.1, params=dict(theta=1.0, sigma=1.0), x0=0.0,
                         jitter=0.0, burn_in=0, splits=[45000, 2500, 2500], gap=0),
        "encoder": dict(hidden_dims=[16, 16], latent_dim=6, append_raw_state=False),
        "training": dict(epochs=50),
        "operator": dict(lag=1),
        "interpret": dict(descriptors=["coordinates", "squares"]),
    },
    "markov": {
        "dynamics": dict(system="markov", n_steps=100000, dt=1.0,
                         params=dict(transition_matrix=[[0.9, 0.1], [0.2, 0.8]]), x0=None, jitter=0.0,
                         burn_in=0, splits=[80000, 10000, 10000], gap=0),
        "encoder": dict(hidden_dims=[8], latent_dim=2),
        "training": dict(epochs=10),
        "operator": dict(lag=1),
    },
}


@dataclass
class RunConfig:
    dynamics: DynamicsSection = field(default_factory=DynamicsSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    training: TrainConfig = field(default_factory=TrainConfig)
    operator: OperatorSection = field(default_factory=OperatorSection)
    spectral: SpectralSection = field(default_factory=SpectralSection)
    interpret: InterpretSection = field(default_factory=InterpretSection)
    preset: str = "lorenz63"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict | None) -> "RunConfig":
        doc = copy.deepcopy(doc or {})
        if not isinstance(doc, dict):
            raise ConfigError("configuration must be a mapping of sections")
        preset = doc.pop("preset", "lorenz63")
        if preset not in PRESETS:
            raise ConfigError(f"preset: unknown preset {preset!r} (choose from {sorted(PRESETS)})")
        unknown = set(doc) - set(_SECTIONS)
        if unknown:
            raise ConfigError(f"unknown configuration key(s): {sorted(unknown)}")
        sections = {}
        for name, klass in _SECTIONS.items():
            values = dict(PRESETS[preset].get(name, {}))
            given = doc.get(name) or {}
            if not isinstance(given, dict):
                raise ConfigError(f"{name}: section must be a mapping")
            allowed = {f.name for f in fields(klass)}
            bad = set(given) - allowed
            if bad:
                raise ConfigError(f"unknown key(s) in section {name!r}: {sorted('%s.%s' % (name, b) for b in bad)}")
            values.update(given)
            try:
                sections[name] = klass(**values)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{name}: {exc}") from None
        cfg = cls(**sections, preset=preset)
        cfg.validate()
        return cfg

    def validate(self):
        d = self.dynamics
        if d.system not in _SYSTEM_PARAMS:
            raise ConfigError(f"dynamics.system: unknown system {d.system!r}")
        bad = set(d.params) - _SYSTEM_PARAMS[d.system]
        if bad:
            raise ConfigError(f"dynamics.params: unknown key(s) {sorted(bad)} for system {d.system!r}")
        if d.format not in ("binary", "csv"):
            raise ConfigError(f"dynamics.format: must be 'binary' or 'csv', got {d.format!r}")
        if len(d.splits) != 3:
            raise ConfigError("dynamics.splits: expected three sizes (train, validation, test)")
        if d.n_steps < 1 or d.dt <= 0:
            raise ConfigError("dynamics.n_steps must be >= 1 and dynamics.dt > 0")
        if self.operator.mode not in ("buffers", "full_pass"):
            raise ConfigError(f"operator.mode: must be 'buffers' or 'full_pass', got {self.operator.mode!r}")
        if self.operator.lag < 1 or self.operator.history < 0:
            raise ConfigError("operator.lag must be >= 1 and operator.history >= 0")
        if self.operator.ridge < 0:
            raise ConfigError("operator.ridge must be >= 0")
        if self.interpret.target not in ("real", "modulus"):
            raise ConfigError(f"interpret.target: must be 'real' or 'modulus', got {self.interpret.target!r}")
        if self.encoder.activation not in ("relu", "tanh", "gelu"):
            raise ConfigError(f"encoder.activation: unknown activation {self.encoder.activation!r}")


def load_config(path=None, preset: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Read a YAML run configuration; ``preset``/``overrides`` apply on top."""
    doc = {}
    if path is not None:
        try:
            doc = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from None
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    if preset is not None:
        doc["preset"] = preset
    for dotted, value in (overrides or {}).items():
        section, key = dotted.split(".", 1)
        doc.setdefault(section, {})
        if doc[section] is None:
            doc[section] = {}
        doc[section][key] = value
    return RunConfig.from_dict(doc)
