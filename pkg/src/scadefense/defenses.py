"""Defense variants: model layouts, training settings and leak-time noise.

Every defense is named by an id string that is also what appears in config
files and result tables, e.g. ``none``, ``laplace_noise(0.5)``,
``dp_sgd(1.0,1.0)`` or ``sca(0.5)``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace

import numpy as np

from .lca import LcaConfig
from .nn import DPConfig, LayerSpec, ModelSpec, TrainConfig

THREAT_ARCHS = ("end_to_end", "split")
DEFENSE_ARITY = {"none": 0, "gaussian_noise": 1, "laplace_noise": 1, "dp_sgd": 2, "sparse_standard": 1, "sca": 1}
OUT_OF_SCOPE = ("gan", "gong", "peng", "wang")

_ID = re.compile(r"^\s*([a-z_]+)\s*(?:\(([^)]*)\))?\s*$")


class UnknownDefenseError(ValueError):
    pass


class OutOfScopeDefenseError(UnknownDefenseError):
    pass


@dataclass(frozen=True)
class DefenseSpec:
    name: str
    params: tuple = ()
    threat_arch: str = "end_to_end"

    def __post_init__(self):
        if self.name in OUT_OF_SCOPE:
            raise OutOfScopeDefenseError(f"defense {self.name!r} is out of scope for this package")
        if self.name not in DEFENSE_ARITY:
            raise UnknownDefenseError(f"unknown defense {self.name!r}; known: {', '.join(DEFENSE_ARITY)}")
        if len(self.params) != DEFENSE_ARITY[self.name]:
            raise ValueError(f"{self.name} takes {DEFENSE_ARITY[self.name]} parameter(s), got {len(self.params)}")
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))
        if self.threat_arch not in THREAT_ARCHS:
            raise ValueError(f"threat_arch must be one of {THREAT_ARCHS}, got {self.threat_arch!r}")
        if self.name in ("sca", "sparse_standard"):
            if not self.params[0] >= 0:
                raise ValueError(f"{self.name} needs lambda >= 0")
        elif any(not p > 0 for p in self.params):
            raise ValueError(f"{self.name} parameters must be positive")

    @classmethod
    def parse(cls, text: str, threat_arch: str = "end_to_end") -> "DefenseSpec":
        m = _ID.match(text)
        if not m:
            raise UnknownDefenseError(f"cannot parse defense id {text!r}")
        name, args = m.group(1), m.group(2)
        if name in OUT_OF_SCOPE:
            raise OutOfScopeDefenseError(f"defense {name!r} is out of scope for this package")
        try:
            params = tuple(float(a) for a in args.split(",")) if args and args.strip() else ()
        except ValueError:
            raise UnknownDefenseError(f"non-numeric parameter in defense id {text!r}") from None
        return cls(name, params, threat_arch)

    @property
    def id(self) -> str:
        if not self.params:
            return self.name
        return f"{self.name}({','.join(repr(p) for p in self.params)})"

    @property
    def is_sparse(self) -> bool:
        return self.name in ("sca", "sparse_standard")


@dataclass(frozen=True)
class ArchitectureConfig:
    """Sizes shared by all target models.

    ``n_linear=None`` picks 5 linear layers for end-to-end and 3 for split.
    The LCA settings apply to every sparse-coding layer.
    """

    hidden_width: int = 256
    n_linear: int | None = None
    n_atoms: int = 8
    kernel_size: int = 5
    stride: int = 1
    tau: float = 1000.0
    lca_iterations: int = 500
    lca_step: float = 1.0
    seed: int = 0

    def linear_count(self, threat_arch: str) -> int:
        if self.n_linear is not None:
            return self.n_linear
        return 5 if threat_arch == "end_to_end" else 3


@dataclass(frozen=True)
class LeakTransform:
    kind: str = "identity"
    scale: float = 0.0

    def __post_init__(self):
        if self.kind not in ("identity", "add_gaussian", "add_laplace"):
            raise ValueError(f"unknown leak transform {self.kind!r}")
        if self.kind != "identity" and not self.scale > 0:
            raise ValueError("noise scale must be positive")

    def hook(self, rng):
        """A forward hook drawing fresh noise from ``rng`` on every call."""
        return lambda a: apply_leak(self, a, rng)


def apply_leak(transform: LeakTransform, activation: np.ndarray, rng) -> np.ndarray:
    if transform.kind == "identity":
        return activation
    if transform.kind == "add_gaussian":
        return activation + rng.normal(0.0, transform.scale, size=np.shape(activation))
    return activation + rng.laplace(0.0, transform.scale, size=np.shape(activation))


def _linear_stack(n_in: int, classes: int, n_linear: int, width: int) -> list[LayerSpec]:
    if n_linear < 1:
        raise ValueError("need at least one linear layer")
    layers, d = [], n_in
    for i in range(1, n_linear):
        layers += [LayerSpec.linear(d, width), LayerSpec("relu", tap=f"fc{i}")]
        d = width
    layers.append(LayerSpec.linear(d, classes, tap="logits"))
    return layers


def build(defense: DefenseSpec, dataset_meta, arch: ArchitectureConfig | None = None,
          train: TrainConfig | None = None) -> tuple[ModelSpec, TrainConfig, LeakTransform]:
    """Model layout, training settings and leak transform for one defense.

    ``dataset_meta`` is ``(input_shape, classes)`` with ``input_shape`` as
    ``(C, H, W)``; a :class:`~scadefense.data.Dataset` also works.
    """
    if hasattr(dataset_meta, "image_shape"):
        dataset_meta = (dataset_meta.image_shape, dataset_meta.classes)
    input_shape, classes = tuple(dataset_meta[0]), int(dataset_meta[1])
    arch = arch or ArchitectureConfig()
    train = train or TrainConfig()
    c, h, w = input_shape
    n_linear = arch.linear_count(defense.threat_arch)
    transform = LeakTransform()
    layers = [LayerSpec("flatten")]
    if defense.is_sparse:
        cfg = LcaConfig(defense.params[0], arch.tau, arch.lca_iterations, arch.lca_step)
        n_pairs = 2 if defense.name == "sca" else 1
        layers, channels = [], c
        for p in range(1, n_pairs + 1):
            layers += [LayerSpec.scl(channels, arch.n_atoms, cfg, arch.kernel_size, arch.stride, tap=f"scl{p}"),
                       LayerSpec.batch_norm(arch.n_atoms, tap=f"bn{p}")]
            channels = arch.n_atoms
            h, w = h // arch.stride, w // arch.stride
        layers.append(LayerSpec("flatten"))
        n_in = channels * h * w
    else:
        n_in = c * h * w
        if defense.name == "gaussian_noise":
            transform = LeakTransform("add_gaussian", defense.params[0])
        elif defense.name == "laplace_noise":
            transform = LeakTransform("add_laplace", defense.params[0])
        elif defense.name == "dp_sgd":
            train = replace(train, dp=DPConfig(*defense.params))
    layers += _linear_stack(n_in, classes, n_linear, arch.hidden_width)
    return ModelSpec(layers, classes, input_shape, arch.seed), train, transform
