"""Surrogate model-inversion attack.

The attacker queries the target with images it owns, records the activation
leaked at a tap, fits an inverter network from activations back to pixels
and then applies it to the victims' leaked activations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import metrics
from .defenses import LeakTransform
from .nn import LayerSpec, Model, ModelSpec, TrainConfig, TrainingDivergenceError, train_regression_epoch
from .tensor import make_rng


class MissingTapError(KeyError):
    pass


@dataclass(frozen=True)
class ThreatModel:
    kind: str
    tap_label: str

    def __post_init__(self):
        if self.kind not in ("end_to_end", "split"):
            raise ValueError(f"threat model must be end_to_end or split, got {self.kind!r}")

    @classmethod
    def for_spec(cls, kind: str, spec: ModelSpec) -> "ThreatModel":
        """Last hidden linear output (end_to_end) or first linear output (split)."""
        fc = [t for t in spec.tap_labels() if t.startswith("fc")]
        if not fc:
            return cls(kind, "logits")
        return cls(kind, fc[-1] if kind == "end_to_end" else fc[0])

    def check(self, spec: ModelSpec) -> None:
        if self.tap_label not in spec.tap_labels():
            raise MissingTapError(f"tap {self.tap_label!r} not found; model taps are {spec.tap_labels()}")


@dataclass
class AttackConfig:
    surrogate_hidden: tuple = (512, 512)
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.01
    attacker_data: str = "holdout"

    def __post_init__(self):
        self.surrogate_hidden = tuple(int(h) for h in self.surrogate_hidden)
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate < 0 or min(self.surrogate_hidden, default=1) < 1:
            raise ValueError("attack epochs must be >= 0, batch size and widths >= 1, learning rate >= 0")


@dataclass
class AttackReport:
    reconstructions: np.ndarray
    psnr_per_image: np.ndarray
    ssim_per_image: np.ndarray
    fid: float | None = None
    accuracy: float | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def psnr(self) -> float:
        return float(np.mean(self.psnr_per_image))

    @property
    def ssim(self) -> float:
        return float(np.mean(self.ssim_per_image))


def leak(target: Model, images, tap: str, transform: LeakTransform, rng, batch_size=256) -> np.ndarray:
    """Activations at ``tap`` for each image, with the leak transform applied."""
    labels = [l.tap for l in target.spec.layers]
    if tap not in labels:
        raise MissingTapError(f"tap {tap!r} not found; model taps are {target.spec.tap_labels()}")
    stop = labels.index(tap) + 1
    hooks = {tap: transform.hook(rng)}
    chunks = [target.forward(images[s : s + batch_size], "eval", hooks, stop=stop)[0]
              for s in range(0, len(images), batch_size)]
    return np.concatenate(chunks).reshape(len(images), -1)


def harvest(target: Model, transform: LeakTransform, tm: ThreatModel, queries, rng) -> tuple[np.ndarray, np.ndarray]:
    """``(activations, images)`` pairs, one per query image."""
    tm.check(target.spec)
    images = queries.images if hasattr(queries, "images") else np.asarray(queries, dtype=np.float64)
    return leak(target, images, tm.tap_label, transform, rng), images


def inverter_spec(n_in: int, image_shape: tuple, hidden=(512, 512), seed: int = 0) -> ModelSpec:
    n_out = int(np.prod(image_shape))
    layers, d = [], n_in
    for h in hidden:
        layers += [LayerSpec.linear(d, h), LayerSpec("relu")]
        d = h
    layers += [LayerSpec.linear(d, n_out), LayerSpec("sigmoid")]
    return ModelSpec(layers, n_out, (n_in,), seed)


def train_inverter(pairs, cfg: AttackConfig, rng, callback=None) -> Model:
    """Fit an activation-to-image network by SGD on squared error."""
    acts, images = pairs
    if len(acts) < 1:
        raise ValueError("need at least one (activation, image) pair")
    acts = np.asarray(acts, dtype=np.float64).reshape(len(acts), -1)
    images = np.asarray(images, dtype=np.float64)
    model = Model(inverter_spec(acts.shape[1], images.shape[1:], cfg.surrogate_hidden, int(rng.integers(2**63))))
    model.image_shape = images.shape[1:]
    targets = images.reshape(len(images), -1)
    train_cfg = TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size, learning_rate=cfg.learning_rate)
    for epoch in range(cfg.epochs):
        try:
            _, mse = train_regression_epoch(model, acts, targets, train_cfg, rng)
        except TrainingDivergenceError as exc:
            raise TrainingDivergenceError(f"inverter diverged in epoch {epoch}: {exc}") from exc
        if callback is not None:
            callback(epoch, mse)
    return model


def invert(inverter: Model, acts: np.ndarray, image_shape) -> np.ndarray:
    out = inverter.predict_output(np.asarray(acts, dtype=np.float64).reshape(len(acts), -1))
    return out.reshape((len(acts),) + tuple(image_shape))


def reconstruct(inverter: Model, target: Model, transform: LeakTransform, tm: ThreatModel, victims, rng,
                fx: metrics.FeatureExtractor | None = None) -> AttackReport:
    """Leak every victim image, invert it and score the reconstructions."""
    acts, images = harvest(target, transform, tm, victims, rng)
    recon = invert(inverter, acts, images.shape[1:])
    report = AttackReport(
        recon,
        np.array([metrics.psnr(a, b) for a, b in zip(images, recon)]),
        np.array([metrics.ssim(a, b) for a, b in zip(images, recon)]),
        metadata={"threat_model": tm.kind, "tap": tm.tap_label},
    )
    if fx is not None and len(images) >= 2:
        report.fid = metrics.fid(images, recon, fx)
    return report


def image_grid(images: np.ndarray, cols: int = 10, pad: int = 1) -> np.ndarray:
    """Tile ``(N, C, H, W)`` images in [0, 1] into one ``(C, rows*H', cols*W')`` canvas."""
    images = np.asarray(images, dtype=np.float64)
    n, c, h, w = images.shape
    cols = max(1, min(cols, n))
    rows = -(-n // cols)
    canvas = np.zeros((c, rows * (h + pad) + pad, cols * (w + pad) + pad))
    for i, img in enumerate(images):
        r, k = divmod(i, cols)
        canvas[:, pad + r * (h + pad) : pad + r * (h + pad) + h, pad + k * (w + pad) : pad + k * (w + pad) + w] = img
    return canvas


def write_netpbm(path, canvas: np.ndarray) -> None:
    """Binary PGM for one channel, PPM for three; values scaled to 0..255."""
    canvas = np.asarray(canvas)
    if canvas.ndim == 2:
        canvas = canvas[None]
    c, h, w = canvas.shape
    if c not in (1, 3):
        raise ValueError(f"PGM/PPM needs 1 or 3 channels, got {c}")
    pixels = np.rint(np.clip(canvas, 0, 1) * 255).astype(np.uint8)
    magic = b"P5" if c == 1 else b"P6"
    body = pixels[0].tobytes() if c == 1 else np.moveaxis(pixels, 0, -1).tobytes()
    Path(path).write_bytes(magic + f"\n{w} {h}\n255\n".encode() + body)


class SurrogateInverter(BaseEstimator, RegressorMixin):
    """Estimator wrapper around :func:`train_inverter`.

    ``fit(A, images)`` learns to map leaked activations ``A`` to images;
    ``predict`` returns images with the training image shape.
    """

    def __init__(self, hidden=(512, 512), epochs=30, batch_size=32, learning_rate=0.01, random_state=0):
        self.hidden = hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.random_state = random_state

    def fit(self, X, y):
        X = check_array(X)
        y = np.asarray(y, dtype=np.float64)
        if len(y) != len(X):
            raise ValueError(f"{len(X)} activations but {len(y)} images")
        cfg = AttackConfig(self.hidden, self.epochs, self.batch_size, self.learning_rate)
        self.image_shape_ = y.shape[1:]
        self.model_ = train_inverter((X, y), cfg, make_rng(self.random_state, 2))
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        return invert(self.model_, check_array(X), self.image_shape_)

    def score(self, X, y, sample_weight=None):
        """Mean PSNR of the reconstructions (higher means a stronger attack)."""
        pred = self.predict(X)
        return float(np.mean([metrics.psnr(a, b) for a, b in zip(np.asarray(y, dtype=np.float64), pred)]))
