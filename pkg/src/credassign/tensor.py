"""Dense array primitives: convolution, pooling, loss, and seeded sampling.

Tensors are plain ``numpy.ndarray`` values. Training runs in float32; the
gradient-check mode runs the same code in float64. Every op preserves the
dtype of its (first) floating input.

Random streams use numpy's PCG64 bit generator. A stream is identified by a
base seed plus an optional component tag; the tag is hashed with CRC32 and
appended to the seed entropy, so ``make_rng(42, "init")`` always yields the
same sequence regardless of which other streams were created before it.
Gaussian draws use ``Generator.standard_normal`` (ziggurat) in float64 and are
cast afterwards, so float32 and float64 builds see the same underlying draws.
"""

from __future__ import annotations

import zlib

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, DomainError, NonFiniteError

FLOAT32 = np.dtype(np.float32)
FLOAT64 = np.dtype(np.float64)


def check_finite(arr: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")
    return arr


# ---------------------------------------------------------------------------
# Random numbers
# ---------------------------------------------------------------------------

def tag_hash(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


def make_rng(seed: int, tag: str | None = None) -> np.random.Generator:
    """Return a PCG64 generator for ``seed``, optionally split by ``tag``."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    if tag is not None:
        entropy.append(tag_hash(tag))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def derive_seed(seed: int, tag: str) -> int:
    """Deterministic 63-bit child seed for a named component."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, tag_hash(tag)])
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def randn(rng: np.random.Generator, shape, sigma: float, dtype=FLOAT32) -> np.ndarray:
    if not sigma > 0:
        raise DomainError(f"sigma must be positive, got {sigma}")
    return (rng.standard_normal(shape) * sigma).astype(dtype)


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - k
    if span < 0:
        raise DimensionError(f"kernel {k} larger than padded input {size + 2 * padding}")
    return span // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Unfold ``x`` (N, C, H, W) into rows of receptive fields.

    Row order is (n, oh, ow); column order is (c, i, j), matching a kernel
    flattened as ``kernel.reshape(C_out, -1)``.
    """
    if x.ndim != 4:
        raise DimensionError(f"expected 4-D input, got shape {x.shape}")
    if stride < 1:
        raise DimensionError(f"stride must be >= 1, got {stride}")
    n, c, h, w = x.shape
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(w, kw, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win[:, :, :oh, :ow]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)


def col2im(cols: np.ndarray, input_shape, kh: int, kw: int, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add rows back onto the input grid."""
    n, c, h, w = input_shape
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(w, kw, stride, padding)
    # (kh, kw, n, oh, ow, c) so each kernel offset is one contiguous block
    blocks = np.ascontiguousarray(cols.reshape(n, oh, ow, c, kh, kw).transpose(4, 5, 0, 1, 2, 3))
    img = np.zeros((n, h + 2 * padding, w + 2 * padding, c), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            img[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :] += blocks[i, j]
    return _unpad_nchw(img, padding, h, w)


def _unpad_nchw(img_nhwc: np.ndarray, padding: int, h: int, w: int) -> np.ndarray:
    if padding:
        img_nhwc = img_nhwc[:, padding:padding + h, padding:padding + w, :]
    return np.ascontiguousarray(img_nhwc.transpose(0, 3, 1, 2))


def _check_kernel(kernel: np.ndarray, channels: int) -> None:
    if kernel.ndim != 4:
        raise DimensionError(f"expected 4-D kernel, got shape {kernel.shape}")
    if kernel.shape[1] != channels:
        raise DimensionError(f"kernel expects {kernel.shape[1]} input channels, got {channels}")


def conv2d(x: np.ndarray, kernel: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Cross-correlate ``x`` (N, C_in, H, W) with ``kernel`` (C_out, C_in, kH, kW)."""
    if x.ndim != 4:
        raise DimensionError(f"expected 4-D input, got shape {x.shape}")
    _check_kernel(kernel, x.shape[1])
    c_out, _, kh, kw = kernel.shape
    n, _, h, w = x.shape
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(w, kw, stride, padding)
    cols = im2col(x, kh, kw, stride, padding)
    out = cols @ kernel.reshape(c_out, -1).T
    return np.ascontiguousarray(out.reshape(n, oh, ow, c_out).transpose(0, 3, 1, 2))


def conv2d_transposed(grad_out: np.ndarray, kernel: np.ndarray, stride: int = 1, padding: int = 0,
                      input_size: tuple[int, int] | None = None) -> np.ndarray:
    """Apply the exact adjoint of :func:`conv2d` with ``kernel`` to ``grad_out``.

    ``input_size`` resolves the forward input's spatial size when stride > 1
    makes it ambiguous; by default the smallest consistent size is used.
    """
    if grad_out.ndim != 4:
        raise DimensionError(f"expected 4-D gradient, got shape {grad_out.shape}")
    if kernel.ndim != 4 or kernel.shape[0] != grad_out.shape[1]:
        raise DimensionError(
            f"kernel {kernel.shape} does not produce {grad_out.shape[1]} output channels")
    c_out, c_in, kh, kw = kernel.shape
    n, _, oh, ow = grad_out.shape
    if input_size is None:
        input_size = ((oh - 1) * stride + kh - 2 * padding, (ow - 1) * stride + kw - 2 * padding)
    h, w = input_size
    if (conv_output_size(h, kh, stride, padding), conv_output_size(w, kw, stride, padding)) != (oh, ow):
        raise DimensionError(f"input size {input_size} inconsistent with output {(oh, ow)}")
    # One (N*H'*W', C_out) @ (C_out, C_in) product per kernel offset, scattered
    # straight into an NHWC buffer; much cheaper than materializing the columns.
    g = np.ascontiguousarray(grad_out.transpose(0, 2, 3, 1)).reshape(n * oh * ow, c_out)
    taps = np.ascontiguousarray(kernel.transpose(2, 3, 0, 1))
    img = np.zeros((n, h + 2 * padding, w + 2 * padding, c_in), dtype=np.result_type(grad_out, kernel))
    for i in range(kh):
        for j in range(kw):
            img[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :] += \
                (g @ taps[i, j]).reshape(n, oh, ow, c_in)
    return _unpad_nchw(img, padding, h, w)


# ---------------------------------------------------------------------------
# Pooling
# ---------------------------------------------------------------------------

def maxpool2d(x: np.ndarray, window: int = 2, stride: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Non-overlapping max pooling.

    Returns the pooled map and, per output cell, the flat (row-major) index of
    the winning element inside its window. Ties go to the first index.
    """
    if window != stride:
        raise DimensionError("only non-overlapping pooling (window == stride) is supported")
    if x.ndim != 4:
        raise DimensionError(f"expected 4-D input, got shape {x.shape}")
    n, c, h, w = x.shape
    if h % window or w % window:
        raise DimensionError(f"spatial size {(h, w)} not divisible by pooling window {window}")
    best = x[:, :, 0::window, 0::window].copy()
    idx = np.zeros(best.shape, dtype=np.int8)
    for a in range(window):
        for b in range(window):
            if a == b == 0:
                continue
            cand = x[:, :, a::window, b::window]
            better = cand > best  # strict: earlier index wins ties
            best = np.where(better, cand, best)
            idx[better] = a * window + b
    return best, idx


def maxpool2d_backward(grad: np.ndarray, argmax: np.ndarray, input_shape, window: int = 2) -> np.ndarray:
    """Route each pooled gradient to the element that won its window."""
    n, c, h, w = input_shape
    oh, ow = h // window, w // window
    if grad.shape != (n, c, oh, ow):
        raise DimensionError(f"pool gradient shape {grad.shape} != {(n, c, oh, ow)}")
    out = np.zeros((n, c, oh, window, ow, window), dtype=grad.dtype)
    zero = grad.dtype.type(0)
    for a in range(window):
        for b in range(window):
            out[:, :, :, a, :, b] = np.where(argmax == a * window + b, grad, zero)
    return out.reshape(n, c, h, w)


# ---------------------------------------------------------------------------
# Dense ops and loss
# ---------------------------------------------------------------------------

def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[-1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def relu(u: np.ndarray) -> np.ndarray:
    return np.maximum(u, 0).astype(u.dtype, copy=False)


def relu_backward_mask(u: np.ndarray) -> np.ndarray:
    """Derivative of ReLU at ``u`` (0 at u == 0)."""
    return (u > 0).astype(u.dtype)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. ``logits``."""
    if logits.ndim != 2:
        raise DimensionError(f"expected (N, K) logits, got shape {logits.shape}")
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"expected {n} labels, got shape {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= k):
        raise DomainError(f"labels must lie in [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(logsum - z[rows, labels]))
    dlogits = np.exp(z - logsum[:, None])
    dlogits[rows, labels] -= 1
    dlogits /= n
    return loss, dlogits.astype(logits.dtype, copy=False)
