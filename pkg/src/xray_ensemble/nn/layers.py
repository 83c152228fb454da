"""Stateless forward/backward kernels for the layers used by the classifier.

Feature maps are channels-last: ``(batch, height, width, channels)``.
Convolution kernels are ``(kh, kw, cin, cout)``. Every function is dtype
preserving so the same code runs in float32 for training and float64 for
gradient checks.
"""
from __future__ import annotations

import numpy as np

from . import _kernels as _k


class ShapeError(ValueError):
    """Raised when tensor shapes do not agree."""


def _pad_amounts(kh: int, kw: int, padding: str) -> tuple[tuple[int, int], tuple[int, int]]:
    if padding == "valid":
        return (0, 0), (0, 0)
    if padding == "same":
        # odd kernels pad symmetrically; even kernels put the extra row/col last
        return ((kh - 1) // 2, kh // 2), ((kw - 1) // 2, kw // 2)
    raise ValueError(f"unknown padding mode {padding!r}")


def _batched(x: np.ndarray, ndim: int) -> tuple[np.ndarray, bool]:
    if x.ndim == ndim - 1:
        return x[None], True
    if x.ndim != ndim:
        raise ShapeError(f"expected a {ndim - 1}-d or {ndim}-d tensor, got shape {x.shape}")
    return x, False


def im2col(x: np.ndarray, kh: int, kw: int, padding: str = "same") -> np.ndarray:
    """Unfold ``x`` into rows of receptive fields ordered ``(kh, kw, cin)``."""
    b, h, w, c = x.shape
    (pt, pb), (pl, pr) = _pad_amounts(kh, kw, padding)
    ho, wo = h + pt + pb - kh + 1, w + pl + pr - kw + 1
    return _k.im2col(np.ascontiguousarray(x), kh, kw, pt, pl, ho, wo)


def _conv_cols(
    x: np.ndarray, kernels: np.ndarray, bias: np.ndarray, padding: str
) -> tuple[np.ndarray, np.ndarray]:
    if kernels.ndim != 4:
        raise ShapeError(f"kernels must be (kh, kw, cin, cout), got {kernels.shape}")
    kh, kw, cin, cout = kernels.shape
    b, h, w, c = x.shape
    if c != cin:
        raise ShapeError(f"input has {c} channels but kernels expect {cin}")
    if bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} does not match {cout} kernels")
    if padding == "valid" and (kh > h or kw > w):
        raise ShapeError(f"kernel {kh}x{kw} larger than input {h}x{w}")
    cols = im2col(x, kh, kw, padding)
    out = cols @ kernels.reshape(kh * kw * cin, cout)
    out += bias
    ho, wo = (h, w) if padding == "same" else (h - kh + 1, w - kw + 1)
    return out.reshape(b, ho, wo, cout), cols


def conv2d_forward(
    x: np.ndarray, kernels: np.ndarray, bias: np.ndarray, padding: str = "same"
) -> np.ndarray:
    """2-D cross-correlation plus bias.

    ``x`` is ``(H, W, Cin)`` or ``(B, H, W, Cin)``; the output keeps the
    same batching. ``"same"`` keeps the spatial size, ``"valid"`` shrinks it
    by ``k - 1``.
    """
    xb, squeeze = _batched(x, 4)
    out, _ = _conv_cols(xb, kernels, bias, padding)
    return out[0] if squeeze else out


def conv2d_backward(
    grad_out: np.ndarray,
    x: np.ndarray,
    kernels: np.ndarray,
    padding: str = "same",
    need_input_grad: bool = True,
    cols: np.ndarray | None = None,
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    """Gradients of :func:`conv2d_forward` w.r.t. input, kernels and bias.

    ``cols`` may carry the unfolded input from the forward pass to skip
    recomputing it.
    """
    xb, squeeze = _batched(x, 4)
    gb, _ = _batched(grad_out, 4)
    kh, kw, cin, cout = kernels.shape
    b, h, w, _ = xb.shape
    ho, wo = (h, w) if padding == "same" else (h - kh + 1, w - kw + 1)
    if gb.shape != (b, ho, wo, cout):
        raise ShapeError(f"upstream gradient {gb.shape} does not match output {(b, ho, wo, cout)}")
    g2 = gb.reshape(-1, cout)
    if cols is None:
        cols = im2col(xb, kh, kw, padding)
    grad_k = (cols.T @ g2).reshape(kh, kw, cin, cout)
    grad_b = g2.sum(axis=0)
    if not need_input_grad:
        return None, grad_k, grad_b

    dcols = g2 @ kernels.reshape(kh * kw * cin, cout).T
    (pt, _), (pl, _) = _pad_amounts(kh, kw, padding)
    grad_x = _k.col2im(dcols, b, h, w, cin, kh, kw, pt, pl, ho, wo)
    grad_x = grad_x[0] if squeeze else grad_x
    return grad_x, grad_k, grad_b


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0)


def _pool_argmax(xb: np.ndarray, window: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-window max and the row-major offset of its first occurrence."""
    return _k.pool_forward(np.ascontiguousarray(xb), window)


def maxpool2d(x: np.ndarray, window: int = 2) -> np.ndarray:
    """Non-overlapping max pooling (stride == window). Trailing rows/cols that
    do not fill a window are dropped."""
    out, _ = maxpool2d_with_argmax(x, window)
    return out


def maxpool2d_with_argmax(x: np.ndarray, window: int = 2) -> tuple[np.ndarray, np.ndarray]:
    xb, squeeze = _batched(x, 4)
    h, w = xb.shape[1:3]
    if h < window or w < window:
        raise ShapeError(f"input {h}x{w} smaller than pool window {window}")
    out, arg = _pool_argmax(xb, window)
    return (out[0], arg[0]) if squeeze else (out, arg)


def maxpool2d_backward(
    grad_out: np.ndarray, x: np.ndarray, window: int = 2, argmax: np.ndarray | None = None
) -> np.ndarray:
    """Route each window's gradient to its first (row-major) maximum."""
    xb, squeeze = _batched(x, 4)
    gb, _ = _batched(grad_out, 4)
    if argmax is None:
        _, arg = _pool_argmax(xb, window)
    else:
        arg, _ = _batched(argmax, 4)
    grad_x = pool_backward_from_argmax(gb, arg, xb.shape[1:3], window)
    return grad_x[0] if squeeze else grad_x


def pool_backward_from_argmax(
    grad_out: np.ndarray, argmax: np.ndarray, input_hw: tuple[int, int], window: int = 2
) -> np.ndarray:
    """Batched pooling gradient when only the input's spatial size is known."""
    h, w = input_hw
    return _k.pool_backward(np.ascontiguousarray(grad_out), argmax, h, w, window)


def dense_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    if x.shape[-1] != weights.shape[0] or bias.shape != (weights.shape[1],):
        raise ShapeError(
            f"dense shapes disagree: x {x.shape}, W {weights.shape}, b {bias.shape}"
        )
    return x @ weights + bias


def dense_backward(
    grad_out: np.ndarray, x: np.ndarray, weights: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x2 = x.reshape(-1, weights.shape[0])
    g2 = grad_out.reshape(-1, weights.shape[1])
    grad_w = x2.T @ g2
    grad_b = g2.sum(axis=0)
    grad_x = (g2 @ weights.T).reshape(x.shape)
    return grad_x, grad_w, grad_b


def dropout(
    x: np.ndarray, rate: float, rng: np.random.Generator | None = None, training: bool = True
) -> tuple[np.ndarray, np.ndarray | None]:
    """Inverted dropout. Returns ``(output, scaled_mask)``; the mask is
    ``None`` when the op is the identity."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x, None
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep).astype(x.dtype) / x.dtype.type(keep)
    return x * mask, mask


def dropout_backward(grad_out: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    return grad_out if mask is None else grad_out * mask


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
