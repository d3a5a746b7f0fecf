"""Independent reference computations used as test oracles.

Nothing here calls into the package's convolution or LCA code paths.
"""

import numpy as np


def synthesis_matrix(atoms, h, w, stride=(1, 1)):
    """Explicit matrix mapping a flattened code to a flattened image.

    Column ``(f, i, j)`` is atom ``f`` placed with its top-left corner at
    ``(i * sh - pad_top, j * sw - pad_left)`` and cropped to the image.
    """
    f, c, kh, kw = atoms.shape
    sh, sw = stride
    ho, wo = h // sh, w // sw
    pt, pl = (kh - 1) // 2, (kw - 1) // 2
    cols = np.zeros((c * h * w, f * ho * wo))
    col = 0
    for a in range(f):
        for i in range(ho):
            for j in range(wo):
                img = np.zeros((c, h, w))
                for dy in range(kh):
                    for dx in range(kw):
                        y, x = i * sh + dy - pt, j * sw + dx - pl
                        if 0 <= y < h and 0 <= x < w:
                            img[:, y, x] += atoms[a, :, dy, dx]
                cols[:, col] = img.ravel()
                col += 1
    return cols


def nonneg_lasso_cd(phi, x, lam, tol=1e-13, max_sweeps=200_000):
    """Cyclic coordinate descent for min 0.5||x - phi a||^2 + lam * sum(a), a >= 0."""
    a = np.zeros(phi.shape[1])
    r = x.copy()
    col_sq = np.sum(phi**2, axis=0)
    for _ in range(max_sweeps):
        biggest = 0.0
        for j in range(phi.shape[1]):
            if col_sq[j] == 0:
                continue
            new = max(0.0, a[j] + (phi[:, j] @ r - lam) / col_sq[j])
            delta = new - a[j]
            if delta != 0.0:
                r -= delta * phi[:, j]
                a[j] = new
                biggest = max(biggest, abs(delta))
        if biggest < tol:
            break
    return a


def lasso_objective(phi, x, a, lam):
    r = x - phi @ a
    return 0.5 * r @ r + lam * np.sum(np.abs(a))


def central_difference(fn, arr, idx, eps=1e-6):
    old = arr[idx]
    arr[idx] = old + eps
    up = fn()
    arr[idx] = old - eps
    down = fn()
    arr[idx] = old
    return (up - down) / (2 * eps)


def brute_silhouette(points, labels):
    """Mean silhouette coefficient by explicit pairwise loops."""
    n = len(points)
    labels = np.asarray(labels)
    total = 0.0
    for i in range(n):
        d = np.sqrt(np.sum((points - points[i]) ** 2, axis=1))
        same = labels == labels[i]
        same[i] = False
        a = d[same].mean() if same.any() else 0.0
        b = min(d[labels == other].mean() for other in np.unique(labels) if other != labels[i])
        total += 0.0 if max(a, b) == 0 else (b - a) / max(a, b)
    return total / n
