"""Reconstruction quality (PSNR, SSIM, Frechet feature distance) and cluster separation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d
from sklearn.metrics import silhouette_score

from .tensor import DimensionError

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _check_pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionError(f"shape mismatch {x.shape} vs {y.shape}")
    return x, y


def psnr(x, y, max_val: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; exact equality saturates at ``PSNR_CAP``."""
    x, y = _check_pair(x, y)
    if max_val <= 0:
        raise ValueError("max_val must be positive")
    mse = np.mean((x - y) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(max_val**2 / mse)))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _ssim_channel(x: np.ndarray, y: np.ndarray) -> float:
    h, w = x.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        # a single global window over the whole (small) image
        mx, my = x.mean(), y.mean()
        vx, vy = x.var(), y.var()
        cov = np.mean((x - mx) * (y - my))
        return float(((2 * mx * my + SSIM_C1) * (2 * cov + SSIM_C2))
                     / ((mx**2 + my**2 + SSIM_C1) * (vx + vy + SSIM_C2)))
    g = gaussian_window()
    half = SSIM_WINDOW // 2

    def blur(img):
        out = correlate1d(correlate1d(img, g, axis=0, mode="constant"), g, axis=1, mode="constant")
        return out[half : h - half, half : w - half]

    mx, my = blur(x), blur(y)
    vx = blur(x * x) - mx**2
    vy = blur(y * y) - my**2
    cov = blur(x * y) - mx * my
    smap = ((2 * mx * my + SSIM_C1) * (2 * cov + SSIM_C2)) / ((mx**2 + my**2 + SSIM_C1) * (vx + vy + SSIM_C2))
    return float(smap.mean())


def ssim(x, y) -> float:
    """Mean structural similarity of two images shaped (H, W) or (C, H, W).

    Uses 11x11 Gaussian windows (sigma 1.5) at valid positions; channels are
    averaged. Images smaller than the window use one global window.
    """
    x, y = _check_pair(x, y)
    if np.array_equal(x, y):
        return 1.0
    if x.ndim == 2:
        x, y = x[None], y[None]
    if x.ndim != 3:
        raise DimensionError(f"ssim expects (H, W) or (C, H, W), got {x.shape}")
    return float(np.mean([_ssim_channel(a, b) for a, b in zip(x, y)]))


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int


def fit_gaussian(features) -> GaussianStats:
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or len(f) < 2:
        raise ValueError(f"need an (N >= 2, D) feature matrix, got {f.shape}")
    cov = np.cov(f, rowvar=False).reshape(f.shape[1], f.shape[1])
    return GaussianStats(f.mean(axis=0), 0.5 * (cov + cov.T), len(f))


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (m + m.T))
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """Frechet distance between two Gaussians (the square root of the squared form)."""
    if a.mean.shape != b.mean.shape:
        raise DimensionError(f"feature dimensions differ: {a.mean.shape} vs {b.mean.shape}")
    if np.array_equal(a.mean, b.mean) and np.array_equal(a.cov, b.cov):
        # the trace terms cancel exactly; skip round-off that the square root would amplify
        return 0.0
    try:
        root_a = _psd_sqrt(a.cov)
        cross = _psd_sqrt(root_a @ b.cov @ root_a)
    except np.linalg.LinAlgError as exc:
        raise ArithmeticError(f"eigendecomposition failed: {exc}") from exc
    d2 = np.sum((a.mean - b.mean) ** 2) + np.trace(a.cov) + np.trace(b.cov) - 2 * np.trace(cross)
    return float(np.sqrt(max(d2, 0.0)))


class FeatureExtractor:
    """Penultimate-layer features of a frozen reference classifier."""

    def __init__(self, model, tap: str, provenance: dict | None = None):
        if tap not in model.spec.tap_labels():
            raise ValueError(f"tap {tap!r} not present in the reference model")
        self.model = model
        self.tap = tap
        self.provenance = dict(provenance or {})

    def features(self, images) -> np.ndarray:
        images = images.images if hasattr(images, "images") else np.asarray(images, dtype=np.float64)
        _, feats = self.model.predict_output(images, tap=self.tap)
        return feats


def fid(real_images, fake_images, fx: FeatureExtractor) -> float:
    return frechet_distance(fit_gaussian(fx.features(real_images)), fit_gaussian(fx.features(fake_images)))


def pca_2d(x) -> np.ndarray:
    """Projection onto the two leading covariance eigenvectors."""
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    centered = x - x.mean(axis=0)
    if centered.shape[1] > centered.shape[0]:
        # the Gram matrix has the same nonzero spectrum and is smaller here
        vals, vecs = np.linalg.eigh(centered @ centered.T)
        top = np.argsort(vals)[::-1][:2]
        return vecs[:, top] * np.sqrt(np.clip(vals[top], 0.0, None))
    vals, vecs = np.linalg.eigh(np.cov(centered, rowvar=False).reshape(x.shape[1], x.shape[1]))
    return centered @ vecs[:, np.argsort(vals)[::-1][:2]]


def cluster_separation(activations, labels) -> float:
    """Mean silhouette of class labels after a 2-D PCA projection.

    If every class collapses onto a single point the intra-class distances are
    zero and the score is defined as 1.
    """
    labels = np.asarray(labels)
    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) < 2 or counts.min() < 2:
        raise ValueError("cluster_separation needs >= 2 classes with >= 2 points each")
    proj = pca_2d(activations)
    uniq = np.unique(np.round(proj, 12), axis=0)
    if len(uniq) == len(classes) and all(len(np.unique(np.round(proj[labels == c], 12), axis=0)) == 1 for c in classes):
        return 1.0
    return float(silhouette_score(proj, labels, metric="euclidean"))
