"""Feed-forward networks with hand-written gradients.

A :class:`Model` is built from a declarative :class:`ModelSpec` (an ordered
list of :class:`LayerSpec`) and supports linear, batch-norm, sparse-coding
(LCA), ReLU, sigmoid and flatten layers. Any layer may carry a ``tap`` label;
:meth:`Model.forward` returns the activations of every tapped layer, and an
optional hook per label can rewrite an activation in flight (used for noise
defenses applied where activations leak).

Training follows the sparse-coding architecture rule: every batch runs
backprop for the dense parameters, then a dictionary-learning step for every
sparse-coding layer except the first, whose dictionary stays fixed after
unsupervised pre-training.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np

from . import lca
from .lca import Dictionary, LcaConfig
from .tensor import DimensionError, make_rng

STANDARDIZE_EPS = 1e-8

LAYER_KINDS = ("linear", "batch_norm", "scl", "relu", "sigmoid", "flatten")


class TrainingDivergenceError(RuntimeError):
    pass


@dataclass
class LayerSpec:
    kind: str
    params: dict = field(default_factory=dict)
    tap: str | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    @classmethod
    def linear(cls, n_in, n_out, tap=None):
        return cls("linear", {"in": int(n_in), "out": int(n_out)}, tap)

    @classmethod
    def batch_norm(cls, features, tap=None):
        return cls("batch_norm", {"features": int(features)}, tap)

    @classmethod
    def scl(cls, channels, n_atoms, cfg: LcaConfig, kernel_size=5, stride=1, standardize=True, tap=None):
        return cls("scl", {"channels": int(channels), "n_atoms": int(n_atoms), "kernel_size": int(kernel_size),
                           "stride": int(stride), "standardize": bool(standardize), **asdict(cfg)}, tap)

    def lca_config(self) -> LcaConfig:
        p = self.params
        return LcaConfig(p["lam"], p["tau"], p["iterations"], p["step"])


@dataclass
class ModelSpec:
    layers: list
    classes: int
    input_shape: tuple
    seed: int = 0

    def __post_init__(self):
        self.layers = [l if isinstance(l, LayerSpec) else LayerSpec(**l) for l in self.layers]
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.shapes()

    def shapes(self) -> list[tuple]:
        """Output shape (without batch axis) of every layer; validates the stack."""
        shape = self.input_shape
        out = []
        for i, layer in enumerate(self.layers):
            p = layer.params
            if layer.kind == "linear":
                if shape != (p["in"],):
                    raise DimensionError(f"layer {i} (linear {p['in']}->{p['out']}) receives shape {shape}")
                shape = (p["out"],)
            elif layer.kind == "batch_norm":
                if shape[0] != p["features"]:
                    raise DimensionError(f"layer {i} (batch_norm {p['features']}) receives shape {shape}")
            elif layer.kind == "scl":
                if len(shape) != 3 or shape[0] != p["channels"]:
                    raise DimensionError(f"layer {i} (scl, {p['channels']} channels) receives shape {shape}")
                shape = (p["n_atoms"], shape[1] // p["stride"], shape[2] // p["stride"])
                if min(shape[1:]) < 1:
                    raise DimensionError(f"layer {i} (scl) stride too large for {shape}")
            elif layer.kind == "flatten":
                shape = (int(np.prod(shape)),)
            out.append(shape)
        if out and out[-1] != (self.classes,):
            raise DimensionError(f"final layer produces {out[-1]}, expected ({self.classes},)")
        return out

    def tap_labels(self) -> list[str]:
        return [l.tap for l in self.layers if l.tap]

    def to_dict(self) -> dict:
        return {"layers": [asdict(l) for l in self.layers], "classes": self.classes,
                "input_shape": list(self.input_shape), "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls([LayerSpec(**l) for l in d["layers"]], d["classes"], tuple(d["input_shape"]), d.get("seed", 0))


@dataclass
class DPConfig:
    clip_norm: float = 1.0
    noise_sigma: float = 1.0

    def __post_init__(self):
        if not (self.clip_norm > 0 and self.noise_sigma > 0):
            raise ValueError("clip_norm and noise_sigma must be positive")


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 0.01
    lca_backprop: bool = False
    dp: DPConfig | None = None
    dict_epochs: int = 1

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate < 0 or self.dict_epochs < 0:
            raise ValueError("epochs/dict_epochs must be >= 0, batch_size >= 1, learning_rate >= 0")
        if isinstance(self.dp, dict):
            self.dp = DPConfig(**self.dp)


# --------------------------------------------------------------------------- layers


class Layer:
    kind = ""
    has_params = False

    def __init__(self, tap=None):
        self.tap = tap
        self.grads: dict = {}
        self.sample_grads: dict | None = None

    def params(self) -> dict:
        return {}

    def buffers(self) -> dict:
        return {}

    def backward(self, grad, need_input_grad=True, per_sample=False):
        raise NotImplementedError


class Linear(Layer):
    kind = "linear"
    has_params = True

    def __init__(self, n_in, n_out, rng, tap=None):
        super().__init__(tap)
        self.weight = rng.standard_normal((n_in, n_out)) * np.sqrt(2.0 / n_in)
        self.bias = np.zeros(n_out)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x, train, need_grad):
        self._x = x if need_grad else None
        return x @ self.weight + self.bias

    def backward(self, grad, need_input_grad=True, per_sample=False):
        x = self._x
        self.grads = {"weight": x.T @ grad, "bias": grad.sum(axis=0)}
        self.sample_grads = {"weight": np.einsum("ni,nj->nij", x, grad), "bias": grad} if per_sample else None
        return grad @ self.weight.T if need_input_grad else None


class BatchNorm(Layer):
    """Per-feature normalisation; statistics pool over batch and spatial axes."""

    kind = "batch_norm"
    has_params = True

    def __init__(self, features, eps=1e-8, momentum=0.1, tap=None):
        super().__init__(tap)
        self.gamma = np.ones(features)
        self.beta = np.zeros(features)
        self.running_mean = np.zeros(features)
        self.running_var = np.ones(features)
        self.eps = eps
        self.momentum = momentum

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    @staticmethod
    def _axes(x):
        return (0,) if x.ndim == 2 else (0, 2, 3)

    @staticmethod
    def _bc(v, ndim):
        return v if ndim == 2 else v[None, :, None, None]

    def forward(self, x, train, need_grad):
        axes = self._axes(x)
        if train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = x.size // x.shape[1]
            self.running_mean *= 1 - self.momentum
            self.running_mean += self.momentum * mean
            self.running_var *= 1 - self.momentum
            self.running_var += self.momentum * var * (m / max(m - 1, 1))
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - self._bc(mean, x.ndim)) * self._bc(inv_std, x.ndim)
        self._cache = (xhat, inv_std, train) if need_grad else None
        return xhat * self._bc(self.gamma, x.ndim) + self._bc(self.beta, x.ndim)

    def backward(self, grad, need_input_grad=True, per_sample=False):
        if per_sample:
            raise ValueError("per-sample gradients are undefined for batch-norm with batch statistics")
        xhat, inv_std, train = self._cache
        nd = grad.ndim
        axes = self._axes(grad)
        self.grads = {"gamma": np.sum(grad * xhat, axis=axes), "beta": np.sum(grad, axis=axes)}
        if not need_input_grad:
            return None
        dxhat = grad * self._bc(self.gamma, nd)
        if not train:
            return dxhat * self._bc(inv_std, nd)
        m = grad.size // grad.shape[1]
        s1 = self._bc(dxhat.sum(axis=axes), nd)
        s2 = self._bc((dxhat * xhat).sum(axis=axes), nd)
        return self._bc(inv_std, nd) * (m * dxhat - s1 - xhat * s2) / m


class SparseCoding(Layer):
    """LCA sparse coding of each (per-sample standardised) input."""

    kind = "scl"

    def __init__(self, dictionary: Dictionary, cfg: LcaConfig, standardize=True, tap=None):
        super().__init__(tap)
        self.dictionary = dictionary
        self.cfg = cfg
        self.standardize = standardize

    def buffers(self):
        return {"atoms": self.dictionary.atoms}

    def prepare(self, x):
        """Zero-mean, unit-variance rescaling of every sample (constant inputs map to 0)."""
        if not self.standardize:
            return x, None
        axes = tuple(range(1, x.ndim))
        centered = x - x.mean(axis=axes, keepdims=True)
        inv_std = 1.0 / np.sqrt(np.mean(centered**2, axis=axes, keepdims=True) + STANDARDIZE_EPS)
        return centered * inv_std, inv_std

    def forward(self, x, train, need_grad, want_dictionary=False):
        xs, inv_std = self.prepare(x)
        state, trace = lca._run(xs, self.dictionary, self.cfg, keep_trace=need_grad, keep_codes=want_dictionary)
        self._x, self._inv_std, self._state, self._trace = xs, inv_std, state, trace
        return state.code

    def backward(self, grad, need_input_grad=True, per_sample=False, want_dictionary=False):
        if per_sample:
            raise ValueError("per-sample gradients are not supported through sparse-coding layers")
        if not (need_input_grad or want_dictionary):
            return None
        gx, gatoms = lca.lca_backward(self._x, self.dictionary, self._trace, grad, want_dictionary)
        self.grads = {"atoms": gatoms} if want_dictionary else {}
        if self.standardize and gx is not None:
            axes = tuple(range(1, gx.ndim))
            y = self._x
            gx = self._inv_std * (gx - gx.mean(axis=axes, keepdims=True)
                                  - y * np.mean(gx * y, axis=axes, keepdims=True))
        return gx


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train, need_grad):
        self._mask = x > 0 if need_grad else None
        return np.maximum(x, 0.0)

    def backward(self, grad, need_input_grad=True, per_sample=False):
        return np.where(self._mask, grad, 0.0)


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x, train, need_grad):
        out = 0.5 * (1.0 + np.tanh(0.5 * x))
        self._out = out if need_grad else None
        return out

    def backward(self, grad, need_input_grad=True, per_sample=False):
        return grad * self._out * (1.0 - self._out)


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, train, need_grad):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad, need_input_grad=True, per_sample=False):
        return grad.reshape(self._shape)


# --------------------------------------------------------------------------- model


class Model:
    """Trainable parameters for a :class:`ModelSpec`."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        rng = make_rng(spec.seed, 0)
        spec.shapes()  # validates the layer chain
        self.layers: list[Layer] = []
        for ls in spec.layers:
            p = ls.params
            if ls.kind == "linear":
                layer = Linear(p["in"], p["out"], rng, ls.tap)
            elif ls.kind == "batch_norm":
                layer = BatchNorm(p["features"], tap=ls.tap)
            elif ls.kind == "scl":
                d = Dictionary.random(p["n_atoms"], p["channels"], p["kernel_size"], rng, (p["stride"],) * 2)
                layer = SparseCoding(d, ls.lca_config(), p.get("standardize", True), ls.tap)
            else:
                layer = {"relu": ReLU, "sigmoid": Sigmoid, "flatten": Flatten}[ls.kind](ls.tap)
            self.layers.append(layer)

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    @property
    def sparse_layers(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.kind == "scl"]

    def frozen_prefix(self) -> int:
        """Leading layers whose output never changes during task training.

        The first sparse-coding layer is frozen, as is anything parameter-free
        directly in front of or behind it.
        """
        k = 0
        first_scl = self.sparse_layers[0] if self.sparse_layers else -1
        for i, layer in enumerate(self.layers):
            if layer.has_params or (layer.kind == "scl" and i != first_scl):
                break
            k = i + 1
        return k

    def forward(self, x, mode="eval", hooks=None, start=0, stop=None, need_grad=False, lca_backprop=False):
        """Run layers ``start..stop`` and return ``(output, taps)``."""
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        train = mode == "train"
        x = np.asarray(x, dtype=np.float64)
        expected = self.spec.input_shape if start == 0 else self.spec.shapes()[start - 1]
        if x.shape[1:] != tuple(expected):
            raise DimensionError(f"model expects inputs of shape (N, {', '.join(map(str, expected))}), got {x.shape}")
        taps = {}
        first_scl = self.sparse_layers[0] if self.sparse_layers else -1
        for i in range(start, len(self.layers) if stop is None else stop):
            layer = self.layers[i]
            if layer.kind == "scl":
                x = layer.forward(x, train, need_grad, want_dictionary=lca_backprop and i != first_scl)
            else:
                x = layer.forward(x, train, need_grad)
            if layer.tap:
                if hooks and layer.tap in hooks:
                    x = hooks[layer.tap](x)
                taps[layer.tap] = x
        return x, taps

    def backward(self, grad, start=0, per_sample=False, lca_backprop=False):
        first_scl = self.sparse_layers[0] if self.sparse_layers else -1
        trainable = [i for i, l in enumerate(self.layers)
                     if i >= start and (l.has_params or (lca_backprop and l.kind == "scl" and i != first_scl))]
        if not trainable:
            return
        lowest = trainable[0]
        for i in range(len(self.layers) - 1, lowest - 1, -1):
            layer = self.layers[i]
            need_input = i > lowest
            if layer.kind == "scl":
                grad = layer.backward(grad, need_input, per_sample, want_dictionary=lca_backprop and i != first_scl)
            else:
                grad = layer.backward(grad, need_input, per_sample)

    def named_parameters(self):
        for i, layer in enumerate(self.layers):
            for name, value in layer.params().items():
                yield f"{i}.{name}", layer, name, value

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {}
        for i, layer in enumerate(self.layers):
            for name, value in {**layer.params(), **layer.buffers()}.items():
                state[f"{i}.{name}"] = value
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        if set(own) != set(state):
            raise ValueError(f"state keys differ: missing {sorted(set(own) - set(state))}, "
                             f"unexpected {sorted(set(state) - set(own))}")
        for key, value in state.items():
            if own[key].shape != value.shape:
                raise DimensionError(f"{key}: expected shape {own[key].shape}, got {value.shape}")
            idx, name = key.split(".", 1)
            layer = self.layers[int(idx)]
            if name == "atoms":
                layer.dictionary = Dictionary.__new__(Dictionary)
                layer.dictionary.atoms = np.array(value, dtype=np.float64)
                layer.dictionary.stride = (self.spec.layers[int(idx)].params["stride"],) * 2
            else:
                setattr(layer, name, np.array(value, dtype=np.float64))

    def predict_output(self, x, hooks=None, batch_size=256, tap=None):
        """Eval-mode outputs in batches; optionally also collect one tap."""
        outs, tapped = [], []
        for s in range(0, len(x), batch_size):
            out, taps = self.forward(x[s : s + batch_size], "eval", hooks)
            outs.append(out)
            if tap is not None:
                tapped.append(taps[tap])
        out = np.concatenate(outs) if outs else np.zeros((0, self.spec.classes))
        return (out, np.concatenate(tapped)) if tap is not None else out


def forward(model: Model, batch, mode="eval", hooks=None):
    return model.forward(batch, mode, hooks)


# --------------------------------------------------------------------------- losses


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_norm
    n = len(labels)
    loss = -log_p[np.arange(n), labels].mean()
    grad = np.exp(log_p)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


def squared_error(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Batch mean of half the per-sample sum of squares, and its gradient."""
    diff = pred - target
    n = len(pred)
    return float(0.5 * np.sum(diff**2) / n), diff / n


# --------------------------------------------------------------------------- training


def _sgd_step(model: Model, lr: float, grads=None):
    for key, layer, name, value in model.named_parameters():
        g = grads[key] if grads is not None else layer.grads.get(name)
        if g is not None:
            value -= lr * g


def _private_gradients(model: Model, n: int, dp: DPConfig, rng) -> dict:
    per_sample = {}
    for key, layer, name, _ in model.named_parameters():
        if layer.sample_grads is None:
            raise ValueError(f"layer {key} produced no per-sample gradients; DP training needs linear-only models")
        per_sample[key] = layer.sample_grads[name].reshape(n, -1)
    norms = np.sqrt(sum(np.sum(g**2, axis=1) for g in per_sample.values()))
    scale = np.minimum(1.0, dp.clip_norm / np.maximum(norms, 1e-300))
    out = {}
    for key, layer, name, value in model.named_parameters():
        summed = scale @ per_sample[key]
        noisy = summed + rng.normal(0.0, dp.noise_sigma * dp.clip_norm, size=summed.shape)
        out[key] = (noisy / n).reshape(value.shape)
    return out


def pretrain_dictionary(model: Model, images: np.ndarray, cfg: TrainConfig, rng) -> None:
    """Unsupervised dictionary learning for the first sparse-coding layer."""
    if not model.sparse_layers or cfg.dict_epochs == 0:
        return
    idx = model.sparse_layers[0]
    x = images
    if idx > 0:
        x, _ = model.forward(images, "eval", stop=idx)
    layer = model.layers[idx]
    x, _ = layer.prepare(x)
    layer.dictionary = lca.learn_dictionary(layer.dictionary, x, layer.cfg, cfg.learning_rate, cfg.dict_epochs,
                                            cfg.batch_size, rng)


def train_epoch(model: Model, data, cfg: TrainConfig, rng, features=None, hooks=None):
    """One pass of shuffled mini-batch SGD with the sparse-layer update rule.

    ``features`` may hold the precomputed output of ``model.frozen_prefix()``
    layers for every example, which skips recomputing frozen sparse codes.
    Returns ``(model, mean_loss)``.
    """
    images, labels = (data.images, data.labels) if hasattr(data, "images") else data
    start = 0
    if features is not None:
        start = model.frozen_prefix()
        images = features
    n = len(labels)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    order = rng.permutation(n)
    first_scl = model.sparse_layers[0] if model.sparse_layers else -1
    losses = []
    for b, s in enumerate(range(0, n, cfg.batch_size)):
        idx = order[s : s + cfg.batch_size]
        xb, yb = images[idx], labels[idx]
        with np.errstate(over="ignore", invalid="ignore"):
            logits, _ = model.forward(xb, "train", hooks, start=start, need_grad=True, lca_backprop=cfg.lca_backprop)
            loss, grad = cross_entropy(logits, yb)
        if not np.isfinite(loss):
            raise TrainingDivergenceError(f"non-finite loss at batch {b}")
        losses.append(loss * len(idx))
        if cfg.dp is not None:
            model.backward(grad * len(idx), start=start, per_sample=True)
            _sgd_step(model, cfg.learning_rate, _private_gradients(model, len(idx), cfg.dp, rng))
        else:
            model.backward(grad, start=start, lca_backprop=cfg.lca_backprop)
            _sgd_step(model, cfg.learning_rate)
        for i in model.sparse_layers:
            if i == first_scl or i < start:
                continue
            layer = model.layers[i]
            updated = lca.dict_update(layer.dictionary, layer._x, layer._state, cfg.learning_rate, rng)
            if cfg.lca_backprop:
                updated = lca._renormalized(updated.atoms - cfg.learning_rate * layer.grads["atoms"],
                                            updated.stride, rng)
            layer.dictionary = updated
    return model, float(np.sum(losses) / n)


def fit(model: Model, data, cfg: TrainConfig, rng, hooks=None, callback=None) -> Model:
    """Pre-train the first sparse dictionary, then run ``cfg.epochs`` epochs."""
    images, labels = (data.images, data.labels) if hasattr(data, "images") else data
    pretrain_dictionary(model, images, cfg, rng)
    features = None
    if model.frozen_prefix() > 0 and model.sparse_layers:
        features = batched_prefix(model, images, model.frozen_prefix())
    for epoch in range(cfg.epochs):
        _, loss = train_epoch(model, (images, labels), cfg, rng, features=features, hooks=hooks)
        if callback is not None:
            callback(epoch, loss)
    return model


def batched_prefix(model: Model, images, stop, batch_size=256):
    return np.concatenate([model.forward(images[s : s + batch_size], "eval", stop=stop)[0]
                           for s in range(0, len(images), batch_size)])


def train_regression_epoch(model: Model, inputs, targets, cfg: TrainConfig, rng) -> tuple[Model, float]:
    """One SGD epoch on half squared error; returns the mean squared error per element."""
    n = len(inputs)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    order = rng.permutation(n)
    total = 0.0
    for b, s in enumerate(range(0, n, cfg.batch_size)):
        idx = order[s : s + cfg.batch_size]
        with np.errstate(over="ignore", invalid="ignore"):
            out, _ = model.forward(inputs[idx], "train", need_grad=True)
            target = targets[idx].reshape(out.shape)
            loss, grad = squared_error(out, target)
        if not np.isfinite(loss):
            raise TrainingDivergenceError(f"non-finite loss at batch {b}")
        total += np.sum((out - target) ** 2)
        model.backward(grad)
        _sgd_step(model, cfg.learning_rate)
    return model, float(total / targets[:n].size)


# --------------------------------------------------------------------------- checks


def _relative_error(a, b, floor=0.0) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def backward_check(model: Model, batch, labels, eps=1e-6, include_dictionaries=False, max_coords=None,
                   seed=0) -> float:
    """Largest relative error between analytic and central-difference gradients.

    Compares every trainable (non-sparse) parameter; with
    ``include_dictionaries`` the atoms of sparse layers after the first are
    checked too. The loss is the training-mode cross-entropy on ``batch``.
    Each parameter's error is relative to the larger of its two gradient
    norms, floored at 1e-3 of the largest gradient norm in the model so that
    parameters whose true gradient vanishes (a bias feeding batch-norm)
    compare on an absolute scale instead of amplifying round-off.
    """
    model = model.copy()
    batch = np.asarray(batch, dtype=np.float64)
    labels = np.asarray(labels)
    buffers = {k: v.copy() for k, v in model.state_dict().items()}

    def loss_value():
        logits, _ = model.forward(batch, "train", lca_backprop=False)
        return cross_entropy(logits, labels)[0]

    logits, _ = model.forward(batch, "train", need_grad=True, lca_backprop=include_dictionaries)
    _, grad = cross_entropy(logits, labels)
    model.backward(grad, lca_backprop=include_dictionaries)
    targets = [(key, value, layer.grads[name]) for key, layer, name, value in model.named_parameters()]
    if include_dictionaries:
        first = model.sparse_layers[0] if model.sparse_layers else -1
        for i in model.sparse_layers:
            if i != first:
                layer = model.layers[i]
                targets.append((f"{i}.atoms", layer.dictionary.atoms, layer.grads["atoms"]))
    rng = np.random.default_rng(seed)
    checked = []
    for _, value, analytic in targets:
        analytic = analytic.copy()
        coords = list(np.ndindex(value.shape))
        if max_coords is not None and len(coords) > max_coords:
            coords = [coords[i] for i in rng.choice(len(coords), max_coords, replace=False)]
        numeric = np.zeros(len(coords))
        for j, idx in enumerate(coords):
            old = value[idx]
            value[idx] = old + eps
            up = loss_value()
            value[idx] = old - eps
            down = loss_value()
            value[idx] = old
            numeric[j] = (up - down) / (2 * eps)
        checked.append((np.array([analytic[c] for c in coords]), numeric))
    model.load_state_dict(buffers)
    floor = 1e-3 * max((max(np.linalg.norm(a), np.linalg.norm(n)) for a, n in checked), default=0.0)
    return max((_relative_error(a, n, floor) for a, n in checked), default=0.0)


def evaluate(model: Model, data, hooks=None, batch_size=256) -> float:
    """Top-1 accuracy in eval mode."""
    images, labels = (data.images, data.labels) if hasattr(data, "images") else data
    if len(labels) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    logits = model.predict_output(images, hooks, batch_size)
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))
