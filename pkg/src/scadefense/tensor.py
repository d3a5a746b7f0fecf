"""Dense array kernels shared by the sparse-coding and network modules.

Arrays are plain ``numpy.ndarray`` objects in float64. Images and codes are
laid out channel-first, either as a single ``(C, H, W)`` sample or as a batch
``(N, C, H, W)``; every kernel accepts both and returns the same rank it was
given.

Convolutions use cross-correlation (no kernel flip) with "same-cover" zero
padding: the output of a stride ``(sh, sw)`` convolution over an ``H x W``
input is exactly ``(H // sh, W // sw)``.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "DimensionError",
    "conv2d",
    "conv2d_transpose",
    "conv2d_weight_grad",
    "matmul",
    "make_rng",
    "same_cover_padding",
]


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based generator for ``seed``, optionally split into a sub-stream.

    Philox is a counter-based bit generator, so streams are identical across
    platforms. Independent sub-streams are derived by extending the seed
    sequence (``make_rng(seed, 3)`` never overlaps ``make_rng(seed, 4)``).
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, stream)])))


def _pair(v) -> tuple[int, int]:
    if np.isscalar(v):
        return int(v), int(v)
    a, b = v
    return int(a), int(b)


def _as_batch(x: np.ndarray, name: str) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"{name} must have shape (C, H, W) or (N, C, H, W), got {x.shape}")


def same_cover_padding(size: int, k: int, s: int) -> tuple[int, int, int]:
    """Return ``(out, pad_before, pad_after)`` for one spatial axis."""
    out = size // s
    if out < 1:
        raise DimensionError(f"extent {size} too small for stride {s}")
    before = (k - 1) // 2
    after = max(0, (out - 1) * s + k - before - size)
    return out, before, after


def _check_kernel(kernel: np.ndarray, channels: int, x_shape, where: str) -> np.ndarray:
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 4:
        raise DimensionError(f"{where}: kernel must be (F, C, Kh, Kw), got {kernel.shape}")
    if kernel.shape[1] != channels:
        raise DimensionError(
            f"{where}: kernel channels {kernel.shape[1]} do not match input channels {channels} "
            f"(input shape {tuple(x_shape)}, kernel shape {kernel.shape})"
        )
    return kernel


def _im2col(x: np.ndarray, kh: int, kw: int, stride, out_hw) -> np.ndarray:
    """Patches of the already padded batch ``x`` as ``(N*Ho*Wo, C*kh*kw)``."""
    sh, sw = stride
    ho, wo = out_hw
    n, c = x.shape[:2]
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, : (ho - 1) * sh + 1 : sh, : (wo - 1) * sw + 1 : sw]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


def _pad_input(x: np.ndarray, kh: int, kw: int, stride):
    sh, sw = stride
    ho, pt, pb = same_cover_padding(x.shape[2], kh, sh)
    wo, pl, pr = same_cover_padding(x.shape[3], kw, sw)
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    return xp, (ho, wo), (pt, pl)


def conv2d(x: np.ndarray, kernel: np.ndarray, stride=(1, 1)) -> np.ndarray:
    """Cross-correlate ``x`` with a bank of ``F`` kernels.

    Parameters
    ----------
    x : ndarray, shape (C, H, W) or (N, C, H, W)
    kernel : ndarray, shape (F, C, Kh, Kw)
    stride : int or (int, int)

    Returns
    -------
    ndarray, shape (F, H // sh, W // sw) or (N, F, H // sh, W // sw)
    """
    xb, single = _as_batch(x, "conv2d input")
    stride = _pair(stride)
    if min(stride) < 1:
        raise DimensionError(f"strides must be >= 1, got {stride}")
    kernel = _check_kernel(kernel, xb.shape[1], np.shape(x), "conv2d")
    f, c, kh, kw = kernel.shape
    n = xb.shape[0]
    if kh == 1 and kw == 1 and stride == (1, 1):
        out = np.einsum("nchw,fc->nfhw", xb, kernel[:, :, 0, 0], optimize=True)
    else:
        xp, (ho, wo), _ = _pad_input(xb, kh, kw, stride)
        cols = _im2col(xp, kh, kw, stride, (ho, wo))
        out = (cols @ kernel.reshape(f, -1).T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    return out[0] if single else out


def conv2d_transpose(code: np.ndarray, kernel: np.ndarray, stride=(1, 1), output_shape=None) -> np.ndarray:
    """Adjoint of :func:`conv2d`: map a code ``(F, Ho, Wo)`` back to ``(C, H, W)``.

    ``output_shape`` gives ``(H, W)``; it defaults to ``(Ho * sh, Wo * sw)``,
    which is the only choice when the stride is 1.
    """
    cb, single = _as_batch(code, "conv2d_transpose code")
    stride = _pair(stride)
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 4 or kernel.shape[0] != cb.shape[1]:
        raise DimensionError(
            f"conv2d_transpose: code shape {np.shape(code)} incompatible with kernel shape {kernel.shape}"
        )
    f, c, kh, kw = kernel.shape
    n, _, ho, wo = cb.shape
    sh, sw = stride
    h, w = output_shape if output_shape is not None else (ho * sh, wo * sw)
    ho_chk, pt, pb = same_cover_padding(h, kh, sh)
    wo_chk, pl, pr = same_cover_padding(w, kw, sw)
    if (ho_chk, wo_chk) != (ho, wo):
        raise DimensionError(f"code extent {(ho, wo)} does not match output {(h, w)} at stride {stride}")
    if kh == 1 and kw == 1 and stride == (1, 1):
        out = np.einsum("nfhw,fc->nchw", cb, kernel[:, :, 0, 0], optimize=True)
    elif stride == (1, 1):
        # Correlation of the code with the spatially flipped, channel-swapped kernel.
        cp = np.pad(cb, ((0, 0), (0, 0), (kh - 1 - pt, pt), (kw - 1 - pl, pl)))
        flipped = kernel[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
        cols = _im2col(cp, kh, kw, (1, 1), (h, w))
        out = (cols @ flipped.T).reshape(n, h, w, c).transpose(0, 3, 1, 2)
    else:
        cols = (cb.transpose(0, 2, 3, 1).reshape(-1, f) @ kernel.reshape(f, -1)).reshape(n, ho, wo, c, kh, kw)
        canvas = np.zeros((n, c, h + pt + pb, w + pl + pr))
        for dy in range(kh):
            for dx in range(kw):
                canvas[:, :, dy : dy + (ho - 1) * sh + 1 : sh, dx : dx + (wo - 1) * sw + 1 : sw] += cols[
                    :, :, :, :, dy, dx
                ].transpose(0, 3, 1, 2)
        out = canvas[:, :, pt : pt + h, pl : pl + w]
    out = np.ascontiguousarray(out)
    return out[0] if single else out


def conv2d_weight_grad(x: np.ndarray, grad_out: np.ndarray, kernel_shape, stride=(1, 1)) -> np.ndarray:
    """Gradient of ``<conv2d(x, K), grad_out>`` with respect to ``K``.

    Batched inputs are summed over the batch axis.
    """
    xb, _ = _as_batch(x, "conv2d_weight_grad input")
    gb, _ = _as_batch(grad_out, "conv2d_weight_grad grad_out")
    stride = _pair(stride)
    f, c, kh, kw = kernel_shape
    if gb.shape[0] != xb.shape[0] or gb.shape[1] != f or xb.shape[1] != c:
        raise DimensionError(
            f"conv2d_weight_grad: input {xb.shape}, grad {gb.shape}, kernel {tuple(kernel_shape)}"
        )
    xp, (ho, wo), _ = _pad_input(xb, kh, kw, stride)
    if gb.shape[2:] != (ho, wo):
        raise DimensionError(f"conv2d_weight_grad: grad extent {gb.shape[2:]} != {(ho, wo)}")
    cols = _im2col(xp, kh, kw, stride, (ho, wo))
    g = gb.transpose(0, 2, 3, 1).reshape(-1, f)
    return (g.T @ cols).reshape(f, c, kh, kw)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a @ b
