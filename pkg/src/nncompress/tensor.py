"""Dense numpy kernels used by the reference networks.

Tensors are plain ``numpy.ndarray`` objects in row-major (C) order. Every
kernel here is a pure function; backward kernels take the cached forward
inputs explicitly instead of hiding state.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidLabelError, ShapeError

DEFAULT_DTYPE = np.float32
FILLS = ("zeros", "constant", "uniform", "normal")


def make_rng(seed):
    """Deterministic generator; the same seed always yields the same stream."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def _check_shape(shape):
    shape = tuple(int(d) for d in shape)
    if not shape or any(d < 1 for d in shape):
        raise ShapeError(f"invalid shape {shape}: dimensions must be >= 1")
    return shape


def create(shape, fill="zeros", *, value=0.0, rng=None, low=-1.0, high=1.0,
           mean=0.0, std=1.0, dtype=DEFAULT_DTYPE):
    """Allocate a tensor of ``shape`` filled according to ``fill``.

    ``fill`` is one of ``zeros``, ``constant`` (uses ``value``), ``uniform``
    (``low``/``high``) or ``normal`` (``mean``/``std``). Random fills draw in
    float64 from ``rng`` and are then cast, so the stream consumed does not
    depend on ``dtype``.
    """
    shape = _check_shape(shape)
    if fill == "zeros":
        return np.zeros(shape, dtype=dtype)
    if fill == "constant":
        return np.full(shape, value, dtype=dtype)
    if fill in ("uniform", "normal"):
        if rng is None:
            raise ValueError(f"{fill} fill requires an rng")
        if fill == "uniform":
            data = rng.uniform(low, high, size=shape)
        else:
            data = rng.normal(mean, std, size=shape)
        return data.astype(dtype)
    raise ValueError(f"unknown fill {fill!r}; expected one of {FILLS}")


def matmul(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def _as_batch(x):
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected C x H x W or N x C x H x W input, got shape {x.shape}")


def conv_output_size(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def _im2col(x, kh, kw, stride, padding):
    # x: N x C x H x W -> cols: (N*H'*W') x (C*kh*kw)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return cols, ho, wo


def conv2d(x, kernels, bias=None, stride=1, padding=0):
    """Cross-correlation (no kernel flip) with zero padding.

    Accepts a single ``C x H x W`` image or an ``N x C x H x W`` batch.
    """
    xb, single = _as_batch(x)
    kernels = np.asarray(kernels)
    if kernels.ndim != 4:
        raise ShapeError(f"kernels must be C_out x C_in x kh x kw, got {kernels.shape}")
    c_out, c_in, kh, kw = kernels.shape
    n, c, h, w = xb.shape
    if c != c_in:
        raise ShapeError(f"input has {c} channels, kernels expect {c_in}")
    if stride < 1 or padding < 0:
        raise ShapeError("stride must be >= 1 and padding >= 0")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h}x{w} (pad {padding})")
    cols, ho, wo = _im2col(xb, kh, kw, stride, padding)
    out = cols @ kernels.reshape(c_out, -1).T
    if bias is not None:
        out = out + bias
    out = out.reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    return out[0] if single else out


def conv2d_backward(grad_out, x, kernels, stride=1, padding=0):
    """Gradients of ``conv2d`` w.r.t. input, kernels and bias (batched form)."""
    c_out, c_in, kh, kw = kernels.shape
    n, _, h, w = x.shape
    cols, ho, wo = _im2col(x, kh, kw, stride, padding)
    g = grad_out.transpose(0, 2, 3, 1).reshape(n * ho * wo, c_out)
    grad_k = (g.T @ cols).reshape(kernels.shape)
    grad_b = g.sum(axis=0)
    dcols = (g @ kernels.reshape(c_out, -1)).reshape(n, ho, wo, c_in, kh, kw)
    dx = np.zeros((n, c_in, h + 2 * padding, w + 2 * padding), dtype=grad_out.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if padding:
        dx = dx[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(dx), grad_k, grad_b


def relu(x):
    x = np.asarray(x)
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def relu_backward(grad_out, x):
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def _pool_windows(xb, window, stride):
    n, c, h, w = xb.shape
    if window < 1 or window > h or window > w:
        raise ShapeError(f"pool window {window} exceeds spatial dims {h}x{w}")
    win = sliding_window_view(xb, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    return win.reshape(win.shape[:4] + (window * window,))


def maxpool2d(x, window=2, stride=None):
    stride = window if stride is None else stride
    xb, single = _as_batch(x)
    out = _pool_windows(xb, window, stride).max(axis=-1)
    return out[0] if single else out


def maxpool2d_backward(grad_out, x, window=2, stride=None):
    # gradient goes to the first maximum of each window (row-major order)
    stride = window if stride is None else stride
    win = _pool_windows(x, window, stride)
    arg = win.argmax(axis=-1)
    n, c, ho, wo = arg.shape
    dx = np.zeros_like(x, dtype=grad_out.dtype)
    di, dj = np.divmod(arg, window)
    nn_, cc, ii, jj = np.indices(arg.shape)
    rows = ii * stride + di
    cols = jj * stride + dj
    np.add.at(dx, (nn_, cc, rows, cols), grad_out)
    return dx


def softmax(logits):
    """Row-wise softmax over the last axis."""
    z = np.asarray(logits)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits):
    z = np.asarray(logits)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _check_labels(labels, num_classes, batch):
    labels = np.asarray(labels)
    if labels.shape != (batch,):
        raise ShapeError(f"expected {batch} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise InvalidLabelError(f"labels must lie in [0, {num_classes})")
    return labels.astype(np.int64)


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of ``labels`` under softmax(``logits``)."""
    logits = np.asarray(logits)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be batch x classes, got {logits.shape}")
    labels = _check_labels(labels, logits.shape[1], logits.shape[0])
    lp = log_softmax(logits)
    return float(-lp[np.arange(len(labels)), labels].mean())


def cross_entropy_backward(logits, labels, scale=1.0):
    """Gradient of ``scale * cross_entropy`` w.r.t. the logits."""
    logits = np.asarray(logits)
    labels = _check_labels(labels, logits.shape[1], logits.shape[0])
    g = softmax(logits)
    g[np.arange(len(labels)), labels] -= 1
    return (g * (scale / len(labels))).astype(logits.dtype, copy=False)
