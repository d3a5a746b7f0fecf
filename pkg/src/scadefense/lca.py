"""Convolutional sparse coding with the Locally Competitive Algorithm.

Each code neuron carries a membrane potential ``P`` driven by the input's
correlation with its atom and inhibited by active neighbours whose atoms
overlap with it::

    dP/dt = (Psi - P - lateral(R)) / tau,   R = relu(P - lam)

where ``Psi = conv2d(x, atoms)`` and ``lateral(R) = conv2d(conv2d_transpose(R))
- R``. The fixed point of these dynamics minimises
``0.5 * ||x - decode(R)||^2 + lam * ||R||_1`` over non-negative codes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.fft as sfft
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .tensor import DimensionError, conv2d, conv2d_transpose, conv2d_weight_grad, make_rng

logger = logging.getLogger(__name__)

__all__ = [
    "Dictionary",
    "LcaConfig",
    "SparseState",
    "LcaDivergenceError",
    "LateralInhibition",
    "soft_threshold",
    "drive",
    "lca_step",
    "lca_solve",
    "lca_backward",
    "energy",
    "reconstruct",
    "dict_update",
    "LcaSparseCoder",
]

_NORM_FLOOR = 1e-12


class LcaDivergenceError(RuntimeError):
    """Potentials became non-finite during the LCA dynamics."""


def _normalize_atoms(atoms: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.sqrt(np.sum(atoms**2, axis=(1, 2, 3)))
    dead = norms < _NORM_FLOOR
    safe = np.where(dead, 1.0, norms)
    return atoms / safe[:, None, None, None], dead


@dataclass
class Dictionary:
    """A bank of ``F`` convolutional atoms of shape ``(C, Hf, Wf)``.

    Atoms are rescaled to unit L2 norm on construction.
    """

    atoms: np.ndarray
    stride: tuple[int, int] = (1, 1)

    def __post_init__(self):
        atoms = np.array(self.atoms, dtype=np.float64)
        if atoms.ndim != 4 or min(atoms.shape) < 1:
            raise DimensionError(f"atoms must have shape (F, C, Hf, Wf) with positive extents, got {atoms.shape}")
        self.stride = tuple(int(s) for s in self.stride)
        if len(self.stride) != 2 or min(self.stride) < 1:
            raise ValueError(f"stride must be two positive integers, got {self.stride}")
        atoms, dead = _normalize_atoms(atoms)
        if dead.any():
            raise ValueError(f"atoms {np.flatnonzero(dead).tolist()} have zero norm")
        self.atoms = atoms

    @classmethod
    def random(cls, n_atoms, channels, kernel_size, rng, stride=(1, 1)) -> "Dictionary":
        kh, kw = (kernel_size, kernel_size) if np.isscalar(kernel_size) else kernel_size
        return cls(rng.standard_normal((n_atoms, channels, kh, kw)), stride)

    @property
    def n_atoms(self) -> int:
        return self.atoms.shape[0]

    @property
    def channels(self) -> int:
        return self.atoms.shape[1]

    def copy(self) -> "Dictionary":
        return Dictionary(self.atoms.copy(), self.stride)


@dataclass(frozen=True)
class LcaConfig:
    """LCA dynamics settings.

    Each Euler update advances the potentials by ``step / tau`` of their
    derivative, so ``iterations * step`` is the simulated time horizon.
    """

    lam: float = 0.5
    tau: float = 1000.0
    iterations: int = 500
    step: float = 1.0

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if not self.tau > 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if int(self.iterations) != self.iterations or self.iterations < 1:
            raise ValueError(f"iterations must be a positive integer, got {self.iterations}")
        if not self.step > 0:
            raise ValueError(f"step must be > 0, got {self.step}")

    @property
    def rate(self) -> float:
        return self.step / self.tau


@dataclass
class SparseState:
    potentials: np.ndarray
    code: np.ndarray

    @classmethod
    def from_potentials(cls, potentials: np.ndarray, lam: float) -> "SparseState":
        return cls(potentials, soft_threshold(potentials, lam))


def soft_threshold(p, lam: float) -> np.ndarray:
    """One-sided soft threshold ``max(0, p - lam)``."""
    if lam < 0:
        raise ValueError(f"threshold must be >= 0, got {lam}")
    return np.maximum(np.asarray(p, dtype=np.float64) - lam, 0.0)


def drive(x: np.ndarray, dictionary: Dictionary) -> np.ndarray:
    """Bottom-up drive: correlation of the input with every atom."""
    return conv2d(x, dictionary.atoms, dictionary.stride)


def reconstruct(code: np.ndarray, dictionary: Dictionary, output_shape=None) -> np.ndarray:
    return conv2d_transpose(code, dictionary.atoms, dictionary.stride, output_shape)


class LateralInhibition:
    """Applies ``v -> encode(decode(v)) - v`` for a fixed dictionary and input size.

    For unit stride and spatial kernels the decode/encode pair is evaluated in
    the frequency domain on a canvas large enough to avoid wrap-around, with
    the image-window crop applied between the two passes, so the result is
    identical (to rounding) to the direct convolution path.
    """

    def __init__(self, dictionary: Dictionary, input_shape):
        self.dictionary = dictionary
        self.input_shape = tuple(int(s) for s in input_shape[-2:])
        f, c, kh, kw = dictionary.atoms.shape
        h, w = self.input_shape
        self._spectral = dictionary.stride == (1, 1) and (kh > 1 or kw > 1)
        if self._spectral:
            self._canvas = (h + kh - 1, w + kw - 1)
            self._pad = ((kh - 1) // 2, (kw - 1) // 2)
            spec = sfft.rfft2(dictionary.atoms, s=self._canvas)  # F, C, P, Q'
            p, q = spec.shape[2:]
            self._k = np.ascontiguousarray(spec.transpose(2, 3, 0, 1).reshape(p * q, f, c))
            self._kh = np.ascontiguousarray(self._k.conj().transpose(0, 2, 1))

    def __call__(self, v: np.ndarray) -> np.ndarray:
        if not self._spectral:
            d = self.dictionary
            return conv2d(conv2d_transpose(v, d.atoms, d.stride, self.input_shape), d.atoms, d.stride) - v
        single = v.ndim == 3
        vb = v[None] if single else v
        n, f = vb.shape[:2]
        h, w = self.input_shape
        ph, pw = self._canvas
        top, left = self._pad
        spec = sfft.rfft2(vb, s=self._canvas)
        q = spec.shape[-1]
        a = spec.transpose(2, 3, 0, 1).reshape(ph * q, n, f)
        c = self._k.shape[2]
        full = (a @ self._k).reshape(ph, q, n, c).transpose(2, 3, 0, 1)
        img = sfft.irfft2(full, s=self._canvas)
        img[:, :, :top] = 0.0
        img[:, :, top + h :] = 0.0
        img[:, :, :, :left] = 0.0
        img[:, :, :, left + w :] = 0.0
        spec = sfft.rfft2(img)
        a = spec.transpose(2, 3, 0, 1).reshape(ph * q, n, c)
        back = (a @ self._kh).reshape(ph, q, n, f).transpose(2, 3, 0, 1)
        out = sfft.irfft2(back, s=self._canvas)[:, :, :h, :w] - vb
        return out[0] if single else out


def _direct_lateral(code, dictionary, input_shape):
    d = dictionary
    return conv2d(conv2d_transpose(code, d.atoms, d.stride, input_shape), d.atoms, d.stride) - code


def lca_step(state: SparseState, psi: np.ndarray, dictionary: Dictionary, cfg: LcaConfig, input_shape=None,
             lateral=None) -> SparseState:
    """Advance the potentials by one Euler step.

    ``input_shape`` is the spatial ``(H, W)`` of the coded input; it is only
    needed when the stride is larger than one.
    """
    if state.potentials.shape != psi.shape:
        raise DimensionError(f"potentials {state.potentials.shape} do not match drive {psi.shape}")
    if input_shape is None:
        input_shape = (psi.shape[-2] * dictionary.stride[0], psi.shape[-1] * dictionary.stride[1])
    code = state.code
    inhibition = lateral(code) if lateral is not None else _direct_lateral(code, dictionary, input_shape)
    p = state.potentials + cfg.rate * (psi - state.potentials - inhibition)
    return SparseState.from_potentials(p, cfg.lam)


def _run(x, dictionary, cfg, keep_trace=False, keep_codes=False):
    psi = drive(x, dictionary)
    lateral = LateralInhibition(dictionary, np.shape(x)[-2:])
    p = np.zeros_like(psi)
    masks, codes = [], []
    with np.errstate(over="ignore", invalid="ignore"):
        state, trace = _iterate(p, psi, lateral, cfg, keep_trace, keep_codes, masks, codes)
    return state, trace


def _iterate(p, psi, lateral, cfg, keep_trace, keep_codes, masks, codes):
    h, lam = cfg.rate, cfg.lam
    for it in range(int(cfg.iterations)):
        mask = p > lam
        if keep_trace:
            masks.append(mask)
        if mask.any():
            code = np.where(mask, p - lam, 0.0)
            inhibition = lateral(code)
            if keep_codes:
                codes.append(code)
            p = p + h * (psi - p - inhibition)
        else:
            if keep_codes:
                codes.append(None)
            p = p + h * (psi - p)
        if not np.isfinite(p).all():
            raise LcaDivergenceError(f"non-finite membrane potential at iteration {it + 1}")
    state = SparseState.from_potentials(p, lam)
    trace = None
    if keep_trace:
        masks.append(p > lam)
        trace = {"masks": masks, "codes": codes, "lateral": lateral, "rate": h}
    return state, trace


def lca_solve(x: np.ndarray, dictionary: Dictionary, cfg: LcaConfig) -> SparseState:
    """Run ``cfg.iterations`` LCA steps from zero potentials.

    ``x`` may be a single ``(C, H, W)`` input or a batch ``(N, C, H, W)``.
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.isfinite(x).all():
        raise ValueError("input contains non-finite values")
    if x.shape[-3] != dictionary.channels:
        raise DimensionError(f"input shape {x.shape} has {x.shape[-3]} channels, dictionary expects "
                             f"{dictionary.channels} (atoms {dictionary.atoms.shape})")
    state, _ = _run(x, dictionary, cfg)
    return state


def lca_backward(x, dictionary: Dictionary, trace, grad_code, want_dictionary=False):
    """Backpropagate through the unrolled Euler iterations of a solve.

    ``trace`` comes from ``_run(..., keep_trace=True)``. Returns
    ``(grad_x, grad_atoms)``; ``grad_atoms`` is ``None`` unless requested, in
    which case the trace must also hold the per-iteration codes.
    """
    masks, lateral, h = trace["masks"], trace["lateral"], trace["rate"]
    codes = trace["codes"]
    gp = np.where(masks[-1], grad_code, 0.0)
    gpsi = np.zeros_like(gp)
    gatoms = np.zeros_like(dictionary.atoms) if want_dictionary else None
    d = dictionary
    shape = np.shape(x)[-2:]
    for k in range(len(masks) - 2, -1, -1):
        gpsi += h * gp
        mask = masks[k]
        if mask.any():
            if want_dictionary:
                code = codes[k]
                gatoms -= h * (
                    conv2d_weight_grad(conv2d_transpose(code, d.atoms, d.stride, shape), gp, d.atoms.shape, d.stride)
                    + conv2d_weight_grad(conv2d_transpose(gp, d.atoms, d.stride, shape), code, d.atoms.shape, d.stride)
                )
            gp = (1.0 - h) * gp - h * np.where(mask, lateral(gp), 0.0)
        else:
            gp = (1.0 - h) * gp
    gx = conv2d_transpose(gpsi, d.atoms, d.stride, shape)
    if want_dictionary:
        gatoms += conv2d_weight_grad(x, gpsi, d.atoms.shape, d.stride)
    return gx, gatoms


def energy(x: np.ndarray, state: SparseState, dictionary: Dictionary, lam: float):
    """Sparse reconstruction objective; per-sample array for batched input."""
    x = np.asarray(x, dtype=np.float64)
    resid = x - reconstruct(state.code, dictionary, x.shape[-2:])
    axes = tuple(range(x.ndim - 3, x.ndim))
    value = 0.5 * np.sum(resid**2, axis=axes) + lam * np.sum(np.abs(state.code), axis=axes)
    return float(value) if x.ndim == 3 else value


def reconstruction_grad(dictionary: Dictionary, x: np.ndarray, code: np.ndarray) -> np.ndarray:
    """Gradient of ``0.5 * ||x - decode(code)||^2`` w.r.t. the atoms, batch-averaged."""
    x = np.asarray(x, dtype=np.float64)
    xb = x[None] if x.ndim == 3 else x
    cb = code[None] if code.ndim == 3 else code
    resid = xb - reconstruct(cb, dictionary, xb.shape[-2:])
    return -conv2d_weight_grad(resid, cb, dictionary.atoms.shape, dictionary.stride) / xb.shape[0]


def dict_update(dictionary: Dictionary, x: np.ndarray, state: SparseState, eta: float, rng=None) -> Dictionary:
    """One gradient step on the reconstruction error with the code held fixed.

    Atoms are renormalised afterwards. An atom driven to zero norm is redrawn
    from ``rng``.
    """
    atoms = dictionary.atoms - eta * reconstruction_grad(dictionary, x, state.code)
    return _renormalized(atoms, dictionary.stride, rng)


def _renormalized(atoms, stride, rng=None) -> Dictionary:
    atoms, dead = _normalize_atoms(atoms)
    if dead.any():
        rng = rng if rng is not None else make_rng(0)
        for i in np.flatnonzero(dead):
            logger.warning("atom %d collapsed to zero norm; reinitialising", i)
            fresh = rng.standard_normal(atoms.shape[1:])
            atoms[i] = fresh / np.linalg.norm(fresh)
    return Dictionary(atoms, stride)


def _as_images(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise ValueError(f"expected images of shape (N, H, W) or (N, C, H, W), got {X.shape}")
    if not np.isfinite(X).all():
        raise ValueError("input contains NaN or infinity")
    return X


class LcaSparseCoder(BaseEstimator, TransformerMixin):
    """Learn a convolutional dictionary and encode images with LCA.

    Parameters
    ----------
    n_atoms : int
        Number of dictionary atoms (code channels).
    kernel_size : int
    stride : int
    lam : float
        Soft threshold; larger values give sparser codes.
    tau, iterations, step : LCA dynamics, see :class:`LcaConfig`.
    eta : float
        Dictionary learning rate.
    n_epochs, batch_size : dictionary learning schedule.
    random_state : int
    """

    def __init__(self, n_atoms=8, kernel_size=5, stride=1, lam=0.5, tau=1000.0, iterations=500, step=1.0,
                 eta=0.01, n_epochs=1, batch_size=32, random_state=0):
        self.n_atoms = n_atoms
        self.kernel_size = kernel_size
        self.stride = stride
        self.lam = lam
        self.tau = tau
        self.iterations = iterations
        self.step = step
        self.eta = eta
        self.n_epochs = n_epochs
        self.batch_size = batch_size
        self.random_state = random_state

    def _config(self) -> LcaConfig:
        return LcaConfig(self.lam, self.tau, self.iterations, self.step)

    def fit(self, X, y=None):
        X = _as_images(X)
        rng = make_rng(self.random_state)
        stride = (self.stride, self.stride) if np.isscalar(self.stride) else tuple(self.stride)
        dictionary = Dictionary.random(self.n_atoms, X.shape[1], self.kernel_size, rng, stride)
        self.dictionary_ = learn_dictionary(dictionary, X, self._config(), self.eta, self.n_epochs,
                                            self.batch_size, rng)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def transform(self, X):
        check_is_fitted(self, "dictionary_")
        return lca_solve(_as_images(X), self.dictionary_, self._config()).code

    def reconstruct(self, codes, output_shape=None):
        check_is_fitted(self, "dictionary_")
        return reconstruct(codes, self.dictionary_, output_shape)


def learn_dictionary(dictionary: Dictionary, images: np.ndarray, cfg: LcaConfig, eta: float, epochs: int,
                     batch_size: int, rng) -> Dictionary:
    """Alternate LCA solves and :func:`dict_update` over shuffled mini-batches."""
    n = images.shape[0]
    for _ in range(int(epochs)):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            batch = images[order[start : start + batch_size]]
            state = lca_solve(batch, dictionary, cfg)
            dictionary = dict_update(dictionary, batch, state, eta, rng)
    return dictionary
