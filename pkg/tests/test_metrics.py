import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import brute_silhouette
from scipy.ndimage import uniform_filter

from scadefense import metrics
from scadefense.metrics import (
    FeatureExtractor,
    GaussianStats,
    cluster_separation,
    fid,
    fit_gaussian,
    frechet_distance,
    psnr,
    ssim,
)
from scadefense.nn import LayerSpec, Model, ModelSpec
from scadefense.tensor import DimensionError


def psnr_loop(x, y, max_val=1.0):
    total = 0.0
    for a, b in zip(np.ravel(x), np.ravel(y)):
        total += (float(a) - float(b)) ** 2
    return 10 * math.log10(max_val**2 / (total / np.size(x)))


def ssim_windows(x, y):
    """Explicit loop over every valid 11x11 window."""
    r = np.arange(11) - 5
    g = np.exp(-(r**2) / (2 * 1.5**2))
    w = np.outer(g, g) / np.outer(g, g).sum()
    vals = []
    for i in range(x.shape[0] - 10):
        for j in range(x.shape[1] - 10):
            a, b = x[i : i + 11, j : j + 11], y[i : i + 11, j : j + 11]
            ma, mb = np.sum(w * a), np.sum(w * b)
            va, vb = np.sum(w * (a - ma) ** 2), np.sum(w * (b - mb) ** 2)
            cov = np.sum(w * (a - ma) * (b - mb))
            c1, c2 = 0.01**2, 0.03**2
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def test_psnr_examples():
    x = np.random.default_rng(0).random((8, 8)) * 0.8
    assert psnr(x, x) == metrics.PSNR_CAP
    assert psnr(x, x + 0.1) == pytest.approx(20.0, abs=1e-9)
    with pytest.raises(DimensionError):
        psnr(x, x[:4])
    with pytest.raises(ValueError):
        psnr(x, x, max_val=0)


def test_psnr_matches_scalar_loop():
    rng = np.random.default_rng(1)
    x, y = rng.random((1, 6, 7)), rng.random((1, 6, 7))
    assert psnr(x, y) == pytest.approx(psnr_loop(x, y), rel=1e-12)
    assert psnr(x, y) == psnr(y, x)


def test_psnr_cap_only_on_equality():
    x = np.zeros((4, 4))
    y = x.copy()
    y[0, 0] = 1e-3
    assert psnr(x, y) < metrics.PSNR_CAP


def test_ssim_identity_and_constants():
    x = np.random.default_rng(2).random((16, 16))
    assert ssim(x, x) == 1.0
    a, b = 0.3, 0.7
    expected = (2 * a * b + 0.01**2) / (a**2 + b**2 + 0.01**2)
    assert ssim(np.full((16, 16), a), np.full((16, 16), b)) == pytest.approx(expected, abs=1e-12)
    # small images use one global window
    assert ssim(np.full((5, 5), a), np.full((5, 5), b)) == pytest.approx(expected, abs=1e-12)


def test_ssim_matches_window_oracle():
    rng = np.random.default_rng(3)
    x = rng.random((20, 17))
    y = np.clip(x + rng.normal(0, 0.1, x.shape), 0, 1)
    assert ssim(x, y) == pytest.approx(ssim_windows(x, y), abs=1e-10)
    assert ssim(x, y) == pytest.approx(ssim(y, x), abs=1e-14)


def test_ssim_multichannel_is_channel_mean():
    rng = np.random.default_rng(4)
    x, y = rng.random((3, 12, 12)), rng.random((3, 12, 12))
    assert ssim(x, y) == pytest.approx(np.mean([ssim(x[c], y[c]) for c in range(3)]))


def test_fit_gaussian_examples():
    s = fit_gaussian(np.array([[0.0, 0.0], [2.0, 0.0]]))
    np.testing.assert_allclose(s.mean, [1, 0])
    np.testing.assert_allclose(s.cov, [[2, 0], [0, 0]])
    assert not fit_gaussian(np.ones((5, 3))).cov.any()
    with pytest.raises(ValueError):
        fit_gaussian(np.ones((1, 3)))


def test_fit_gaussian_two_pass():
    f = np.random.default_rng(5).normal(size=(40, 4))
    mean = f.sum(axis=0) / len(f)
    cov = sum(np.outer(r - mean, r - mean) for r in f) / (len(f) - 1)
    s = fit_gaussian(f)
    np.testing.assert_allclose(s.mean, mean, atol=1e-12)
    np.testing.assert_allclose(s.cov, cov, atol=1e-12)
    np.testing.assert_array_equal(s.cov, s.cov.T)


def test_frechet_closed_forms():
    a = GaussianStats(np.zeros(1), np.eye(1), 10)
    b = GaussianStats(np.ones(1), np.eye(1), 10)
    assert frechet_distance(a, b) == pytest.approx(1.0, abs=1e-6)
    c = GaussianStats(np.zeros(2), np.diag([1.0, 4.0]), 10)
    d = GaussianStats(np.zeros(2), np.diag([4.0, 1.0]), 10)
    assert frechet_distance(c, d) ** 2 == pytest.approx(2.0, abs=1e-6)
    assert frechet_distance(c, c) == pytest.approx(0.0, abs=1e-8)
    with pytest.raises(DimensionError):
        frechet_distance(a, c)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 5))
def test_frechet_symmetric_nonnegative(seed, dim):
    rng = np.random.default_rng(seed)
    # rank-deficient covariances exercise the clamping path
    a = fit_gaussian(rng.normal(size=(dim + 1, dim)) @ rng.normal(size=(dim, dim)))
    b = fit_gaussian(rng.normal(size=(3, dim)))
    ab, ba = frechet_distance(a, b), frechet_distance(b, a)
    assert ab >= 0
    assert ab == pytest.approx(ba, rel=1e-6, abs=1e-6)


def test_frechet_matches_scipy_sqrtm():
    from scipy.linalg import sqrtm

    rng = np.random.default_rng(6)
    a, b = fit_gaussian(rng.normal(size=(30, 4))), fit_gaussian(rng.normal(1, 2, size=(30, 4)))
    d2 = np.sum((a.mean - b.mean) ** 2) + np.trace(a.cov + b.cov - 2 * np.real(sqrtm(a.cov @ b.cov)))
    assert frechet_distance(a, b) == pytest.approx(np.sqrt(d2), rel=1e-8)


def reference_extractor():
    layers = [LayerSpec("flatten"), LayerSpec.linear(64, 16), LayerSpec("relu", tap="features"),
              LayerSpec.linear(16, 3)]
    return FeatureExtractor(Model(ModelSpec(layers, 3, (1, 8, 8), seed=1)), "features")


def test_fid_examples():
    rng = np.random.default_rng(7)
    yy, xx = np.mgrid[:8, :8]
    real = np.array([np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / 4) for cy, cx in rng.uniform(2, 6, (60, 2))])[:, None]
    fx = reference_extractor()
    assert fid(real, real, fx) == pytest.approx(0.0, abs=1e-8)
    blurred = uniform_filter(real, size=(1, 1, 2, 2))
    noise = rng.random(real.shape)
    assert fid(real, noise, fx) > fid(real, blurred, fx)
    perm = rng.permutation(len(real))
    assert fid(real, noise, fx) == pytest.approx(fid(real[perm], noise[::-1], fx), rel=1e-9)


def test_feature_extractor_rejects_unknown_tap():
    with pytest.raises(ValueError):
        FeatureExtractor(reference_extractor().model, "nope")


def test_cluster_separation_examples():
    rng = np.random.default_rng(8)
    pts = np.concatenate([rng.normal((-10, 0), 0.1, (20, 2)), rng.normal((10, 0), 0.1, (20, 2))])
    labels = np.repeat([0, 1], 20)
    assert cluster_separation(pts, labels) > 0.9
    shuffled = [cluster_separation(pts, rng.permutation(labels)) for _ in range(20)]
    assert abs(np.mean(shuffled)) < 0.05
    dup = np.array([[0.0, 0.0]] * 3 + [[5.0, 1.0]] * 3)
    assert cluster_separation(dup, [0, 0, 0, 1, 1, 1]) == 1.0
    with pytest.raises(ValueError):
        cluster_separation(pts[:3], [0, 0, 1])


def test_cluster_separation_matches_brute_force():
    rng = np.random.default_rng(9)
    acts = rng.normal(size=(45, 6)) + np.repeat(np.eye(6)[:3] * 3, 15, axis=0)
    labels = np.repeat([0, 1, 2], 15)
    centered = acts - acts.mean(axis=0)
    vals, vecs = np.linalg.eigh(np.cov(centered, rowvar=False))
    proj = centered @ vecs[:, np.argsort(vals)[::-1][:2]]
    assert cluster_separation(acts, labels) == pytest.approx(brute_silhouette(proj, labels), abs=1e-10)
    # the wide (D > N) path projects through the Gram matrix
    wide = np.concatenate([acts, np.zeros((45, 100))], axis=1)
    assert cluster_separation(wide, labels) == pytest.approx(brute_silhouette(proj, labels), abs=1e-8)
