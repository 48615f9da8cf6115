"""Experiment configuration: dataclasses, JSON round-trip and dotted overrides."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """Raised for invalid or inconsistent configuration."""


@dataclass
class EncoderConfig:
    """Shape of one backbone tower.

    ``input_size`` may be left as ``None``; :meth:`ExperimentConfig.resolve`
    fills it from the payload width of the synthetic world.
    """

    input_size: int | None = None
    num_tokens: int = 4
    token_dim: int = 64
    hidden: int = 128
    global_dim: int = 64
    seed: int = 0


@dataclass
class WorldSpec:
    num_latent_attributes: int = 6
    values_per_attribute: int = 4
    noise_std: float = 1.0
    render_seed: int = 0
    gallery_size: int = 256
    image_dim: int = 32

    @property
    def text_dim(self) -> int:
        # one one-hot slot per latent attribute; slot value 0 means "unchanged"
        return self.num_latent_attributes * (self.values_per_attribute + 1)

    def validate(self) -> None:
        if self.num_latent_attributes < 1:
            raise ConfigError("num_latent_attributes must be >= 1")
        if self.values_per_attribute < 2:
            raise ConfigError("values_per_attribute must be >= 2")
        if self.gallery_size < 2:
            raise ConfigError("gallery_size must be >= 2")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be nonnegative")
        if self.gallery_size > self.values_per_attribute ** self.num_latent_attributes:
            raise ConfigError(
                f"cannot draw {self.gallery_size} distinct latent vectors from "
                f"{self.values_per_attribute}^{self.num_latent_attributes} combinations"
            )


@dataclass
class DataConfig:
    n_train: int = 5000
    n_eval: int = 1000
    max_changes: int = 2
    train_seed: int = 1
    eval_seed: int = 2
    subset_size: int = 0  # >0 attaches a random candidate subset to each eval query


@dataclass
class ModelConfig:
    P: int = 4
    Q: int = 8
    D: int = 64
    image_encoder: EncoderConfig = field(default_factory=EncoderConfig)
    text_encoder: EncoderConfig = field(default_factory=lambda: EncoderConfig(seed=1))
    head_hidden: int | None = None  # defaults to D
    activation: str = "relu"
    stop_gradient_distillation: bool = True
    init_seed: int = 0

    @property
    def K(self) -> int:
        return self.P + self.Q

    def validate(self) -> None:
        if self.P < 0 or self.Q < 0 or self.P + self.Q < 1:
            raise ConfigError("need P >= 0, Q >= 0 and P + Q >= 1")
        if self.D < 1:
            raise ConfigError("D must be positive")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}; choose from {sorted(ACTIVATIONS)}")
        for enc in (self.image_encoder, self.text_encoder):
            if enc.num_tokens < 1:
                raise ConfigError("encoder num_tokens must be >= 1")


ACTIVATIONS = ("relu", "gelu", "tanh")

ABLATIONS: dict[str, tuple[str, ...]] = {
    "w/o_ortho": ("mu",),
    "w/o_target_guide": ("lambda_", "eta", "nu", "kappa"),
    "w/o_target_guide_c": ("nu",),
    "w/o_target_guide_m": ("kappa",),
}

# (tau, lambda, eta, mu, nu, kappa) as tuned per benchmark
PRESETS: dict[str, dict[str, float]] = {
    "fashioniq": dict(tau=0.1, lambda_=1.0, eta=1.0, mu=0.1, nu=10.0, kappa=0.5),
    "shoes": dict(tau=0.1, lambda_=1.0, eta=1.0, mu=0.05, nu=5.0, kappa=0.5),
    "cirr": dict(tau=0.05, lambda_=1.0, eta=1.0, mu=0.1, nu=1.0, kappa=0.1),
}


@dataclass
class TrainConfig:
    batch_size: int = 64
    epochs: int = 15
    base_lr: float = 2e-3
    backbone_lr: float = 2e-3
    lr_decay_factor: float = 0.1
    decay_epochs: list[int] = field(default_factory=lambda: [5, 10])
    tau: float = 0.1
    lambda_: float = 1.0
    eta: float = 1.0
    mu: float = 0.1
    nu: float = 10.0
    kappa: float = 0.5
    weight_decay: float = 0.01
    betas: list[float] = field(default_factory=lambda: [0.9, 0.999])
    grad_clip: float | None = None
    freeze_backbone: bool = False
    seed: int = 0
    ablations: list[str] = field(default_factory=list)

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.base_lr <= 0 or self.backbone_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if self.tau <= 0:
            raise ConfigError("temperature tau must be positive")
        if list(self.decay_epochs) != sorted(self.decay_epochs):
            raise ConfigError("decay_epochs must be ascending")
        for name in ("lambda_", "eta", "mu", "nu", "kappa"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss weight {name} must be nonnegative")
        unknown = set(self.ablations) - set(ABLATIONS)
        if unknown:
            raise ConfigError(f"unknown ablation(s) {sorted(unknown)}; choose from {sorted(ABLATIONS)}")

    def loss_weights(self) -> dict[str, float]:
        """Trade-off weights after applying the ablation switches."""
        weights = {n: getattr(self, n) for n in ("lambda_", "eta", "mu", "nu", "kappa")}
        for ablation in self.ablations:
            for name in ABLATIONS[ablation]:
                weights[name] = 0.0
        return weights

    def lr_scale(self, epoch: int) -> float:
        """Multiplier applied to both learning rates during 0-based ``epoch``."""
        passed = sum(1 for e in self.decay_epochs if epoch >= e)
        return self.lr_decay_factor ** passed

    @classmethod
    def from_preset(cls, name: str, **overrides: Any) -> "TrainConfig":
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return cls(**{**PRESETS[name], **overrides})


@dataclass
class EvalConfig:
    ks: list[int] = field(default_factory=lambda: [1, 5, 10, 50])
    subset_ks: list[int] = field(default_factory=list)
    protocol: str = "synthetic"


@dataclass
class ExperimentConfig:
    world: WorldSpec = field(default_factory=WorldSpec)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def resolve(self) -> "ExperimentConfig":
        """Return a copy with encoder input sizes filled in and everything validated."""
        cfg = copy.deepcopy(self)
        if cfg.model.image_encoder.input_size is None:
            cfg.model.image_encoder.input_size = cfg.world.image_dim
        if cfg.model.text_encoder.input_size is None:
            cfg.model.text_encoder.input_size = cfg.world.text_dim
        cfg.world.validate()
        cfg.model.validate()
        cfg.train.validate()
        if not 1 <= cfg.data.max_changes <= cfg.world.num_latent_attributes:
            raise ConfigError("max_changes must lie in [1, num_latent_attributes]")
        return cfg

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ExperimentConfig":
        return _build(cls, data)

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_json(cls, path: str | Path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(data)

    def with_overrides(self, overrides: list[str] | dict[str, Any]) -> "ExperimentConfig":
        """Apply ``section.key=value`` overrides; values are parsed as JSON when possible."""
        data = self.to_dict()
        items = overrides.items() if isinstance(overrides, dict) else (_split(o) for o in overrides)
        for key, value in items:
            node = data
            parts = key.split(".")
            for part in parts[:-1]:
                if not isinstance(node, dict) or part not in node:
                    raise ConfigError(f"unknown config key {key!r}")
                node = node[part]
            if not isinstance(node, dict) or parts[-1] not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[parts[-1]] = value
        return type(self).from_dict(data)


def _split(item: str) -> tuple[str, Any]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def _build(cls, data: Any):
    if not dataclasses.is_dataclass(cls):
        return data
    if not isinstance(data, dict):
        raise ConfigError(f"expected a mapping for {cls.__name__}, got {type(data).__name__}")
    hints = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(hints)
    if unknown:
        raise ConfigError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        sub = _NESTED.get((cls.__name__, name))
        kwargs[name] = _build(sub, value) if sub is not None else value
    return cls(**kwargs)


_NESTED = {
    ("ExperimentConfig", "world"): WorldSpec,
    ("ExperimentConfig", "data"): DataConfig,
    ("ExperimentConfig", "model"): ModelConfig,
    ("ExperimentConfig", "train"): TrainConfig,
    ("ExperimentConfig", "eval"): EvalConfig,
    ("ModelConfig", "image_encoder"): EncoderConfig,
    ("ModelConfig", "text_encoder"): EncoderConfig,
}


def fingerprint(model_config: ModelConfig) -> str:
    """Stable hash of everything that determines parameter names and shapes."""
    blob = json.dumps(asdict(model_config), sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()
