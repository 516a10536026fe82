"""Pure numpy implementations of the hot kernels.

Every function here has a twin in ``_ckernels.pyx`` with the same signature.
Arrays are float64, C-contiguous, batched as (N, C, H, W).
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BACKEND = "numpy"


def same_padding(k):
    """Zero padding (before, after) that keeps the spatial extent for kernel size ``k``."""
    before = (k - 1) // 2
    return before, k - 1 - before


def _pad(x, kh, kw):
    (t, b), (l, r) = same_padding(kh), same_padding(kw)
    return np.pad(x, ((0, 0), (0, 0), (t, b), (l, r)))


def conv2d_forward(x, w, b):
    kh, kw = w.shape[2], w.shape[3]
    patches = sliding_window_view(_pad(x, kh, kw), (kh, kw), axis=(2, 3))
    # patches: (N, Ci, H, W, kh, kw)
    y = np.tensordot(patches, w, axes=([1, 4, 5], [1, 2, 3]))
    y = np.ascontiguousarray(y.transpose(0, 3, 1, 2))
    y += b[None, :, None, None]
    return y


def conv2d_backward(x, w, gy):
    """Return (grad_x, grad_w, grad_b) for a same-padded stride-1 convolution."""
    n, ci, h, wd = x.shape
    kh, kw = w.shape[2], w.shape[3]
    xp = _pad(x, kh, kw)
    patches = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    gw = np.tensordot(gy, patches, axes=([0, 2, 3], [0, 2, 3]))
    gb = gy.sum(axis=(0, 2, 3))
    gxp = np.zeros_like(xp)
    for i in range(kh):
        for j in range(kw):
            # (N, Co, H, W) x (Co, Ci) -> (N, H, W, Ci)
            contrib = np.tensordot(gy, w[:, :, i, j], axes=([1], [0]))
            gxp[:, :, i:i + h, j:j + wd] += contrib.transpose(0, 3, 1, 2)
    (t, _), (l, _) = same_padding(kh), same_padding(kw)
    gx = np.ascontiguousarray(gxp[:, :, t:t + h, l:l + wd])
    return gx, np.ascontiguousarray(gw), gb


def maxpool_forward(x, ph, pw):
    """Max pooling with ceil-mode partial windows.

    Returns the pooled array and, per output cell, the flat (row-major) index
    of the winning input cell inside its channel plane.
    """
    n, c, h, w = x.shape
    oh, ow = -(-h // ph), -(-w // pw)
    padded = np.full((n, c, oh * ph, ow * pw), -np.inf)
    padded[:, :, :h, :w] = x
    blocks = padded.reshape(n, c, oh, ph, ow, pw).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, oh, ow, ph * pw)
    # argmax returns the first maximal element, i.e. row-major first within the window
    local = blocks.argmax(axis=-1)
    y = np.take_along_axis(blocks, local[..., None], axis=-1)[..., 0]
    rows = np.arange(oh)[:, None] * ph + local // pw
    cols = np.arange(ow)[None, :] * pw + local % pw
    idx = (rows * w + cols).astype(np.int64)
    return np.ascontiguousarray(y), idx


def maxpool_backward(gy, idx, in_shape):
    n, c, h, w = in_shape
    gx = np.zeros((n * c, h * w))
    flat_idx = idx.reshape(n * c, -1)
    # pooling windows never overlap, so each winner receives exactly one gradient
    np.put_along_axis(gx, flat_idx, gy.reshape(n * c, -1), axis=1)
    return gx.reshape(in_shape)


def upsample_forward(x, fh, fw):
    return np.ascontiguousarray(np.repeat(np.repeat(x, fh, axis=2), fw, axis=3))


def upsample_backward(gy, fh, fw):
    n, c, h, w = gy.shape
    return gy.reshape(n, c, h // fh, fh, w // fw, fw).sum(axis=(3, 5))
