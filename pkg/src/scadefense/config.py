"""Flat ``key = value`` experiment configuration files."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .attacks import AttackConfig
from .defenses import ArchitectureConfig, DefenseSpec
from .nn import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str = "mnist"
    images_path: str = ""
    labels_path: str = ""
    downsample: int = 2
    train_fraction: float = 0.7
    defense: str = "none"
    threat_model: str = "end_to_end"
    seed_model: int = 0
    seed_attack: int = 0
    seed_split: int = 0
    # target training
    epochs: int = 5
    batch_size: int = 32
    learning_rate: float = 0.05
    dict_epochs: int = 1
    lca_backprop: bool = False
    # architecture
    hidden_width: int = 256
    n_linear: int = 0
    n_atoms: int = 8
    kernel_size: int = 5
    stride: int = 1
    tau: float = 1000.0
    lca_iterations: int = 20
    lca_step: float = 25.0
    # attack
    attack_hidden: str = "512,512"
    attack_epochs: int = 150
    attack_batch_size: int = 8
    attack_learning_rate: float = 0.02
    # reference feature extractor for FID
    fx_seed: int = 0
    fx_epochs: int = 20
    output_dir: str = "runs"
    timing: bool = False

    def __post_init__(self):
        try:
            self.defense_spec()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.threat_model not in ("end_to_end", "split"):
            raise ConfigError(f"threat_model must be end_to_end or split, got {self.threat_model!r}")
        if self.dataset != "mnist" and not (self.images_path and self.labels_path):
            raise ConfigError("datasets other than the bundled 'mnist' need images_path and labels_path")
        if self.downsample < 1:
            raise ConfigError("downsample must be >= 1")

    def defense_spec(self) -> DefenseSpec:
        return DefenseSpec.parse(self.defense, self.threat_model)

    def architecture(self) -> ArchitectureConfig:
        return ArchitectureConfig(self.hidden_width, self.n_linear or None, self.n_atoms, self.kernel_size, self.stride,
                                  self.tau, self.lca_iterations, self.lca_step, self.seed_model)

    def training(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.batch_size, self.learning_rate, self.lca_backprop, None, self.dict_epochs)

    def attack(self) -> AttackConfig:
        hidden = tuple(int(h) for h in self.attack_hidden.split(",") if h.strip())
        return AttackConfig(hidden, self.attack_epochs, self.attack_batch_size, self.attack_learning_rate)

    def with_seeds(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed_model=seed, seed_attack=seed)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _coerce(name: str, raw: str, kind, lineno: int, path):
    where = f"{path}:{lineno}" if lineno else str(path)
    try:
        if kind is bool:
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{where}: {name} expects a {kind.__name__}, got {raw!r}") from None


_TYPES = {f.name: {"int": int, "float": float, "bool": bool, "str": str}[f.type] for f in fields(ExperimentConfig)}


def parse_config(text: str, path="<config>", overrides: dict | None = None) -> ExperimentConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment. Errors cite line numbers."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        values[key] = (_coerce(key, raw, _TYPES[key], lineno, path), lineno)
    for key, raw in (overrides or {}).items():
        if key not in _TYPES:
            raise ConfigError(f"unknown override {key!r}")
        values[key] = (_coerce(key, str(raw), _TYPES[key], 0, "override") if isinstance(raw, str) else raw, 0)
    try:
        return ExperimentConfig(**{k: v for k, (v, _) in values.items()})
    except ConfigError as exc:
        lines = [ln for k, (_, ln) in values.items() if k in ("defense", "threat_model") and ln]
        prefix = f"{path}:{lines[0]}: " if lines else f"{path}: "
        raise ConfigError(prefix + str(exc)) from None


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, path, overrides)
