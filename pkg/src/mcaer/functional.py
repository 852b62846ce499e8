"""Differentiable neural-network operations on :class:`~mcaer.tensor.Tensor`.

Image tensors use NCHW layout. Convolutions are lowered to a single matrix
product over an im2col buffer laid out as ``(C*kh*kw, N*Ho*Wo)``; this keeps
the BLAS call large even when channel counts are tiny.
"""

from __future__ import annotations

import contextlib
import hashlib
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import DimensionError, StateError, ValidationError
from .tensor import Tensor, unbroadcast

_branch_log: Optional[list] = None


@contextlib.contextmanager
def record_branches() -> Iterator[list]:
    """Collect the discrete decisions (ReLU signs, max-pool winners) made while active.

    Two evaluations with equal records ran through the same smooth piece of
    the network; finite-difference checks use this to skip non-smooth points.
    """
    global _branch_log
    outer, _branch_log = _branch_log, []
    try:
        yield _branch_log
    finally:
        _branch_log = outer


def branch_digest(log: Sequence[np.ndarray]) -> bytes:
    h = hashlib.sha1()
    for arr in log:
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.digest()


def _check_4d(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise DimensionError(f"{what} expects a 4-d NCHW tensor, got shape {x.shape}")


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride].transpose(
                1, 0, 2, 3
            )
    return cols.reshape(c * kh * kw, n * ho * wo)


def _col2im(cols: np.ndarray, shape: tuple, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = shape[:2]
    out = np.zeros(shape, dtype=cols.dtype)
    cols = cols.reshape(c, kh, kw, n, ho, wo)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, i, j].transpose(
                1, 0, 2, 3
            )
    return out


def _pad_hw(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation. ``x``: [N,Cin,H,W], ``w``: [Cout,Cin,kh,kw]."""
    _check_4d(x, "conv2d input")
    _check_4d(w, "conv2d weight")
    n, cin, h, wd = x.shape
    cout, wcin, kh, kw = w.shape
    if wcin != cin:
        raise DimensionError(
            f"conv2d: input has {cin} channels but weight expects {wcin} (x {x.shape}, w {w.shape})"
        )
    if stride < 1:
        raise ValidationError(f"conv2d: stride must be >= 1, got {stride}")
    hp, wp = h + 2 * padding, wd + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    if b is not None and b.shape != (cout,):
        raise DimensionError(f"conv2d: bias shape {b.shape} does not match {cout} output channels")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = _pad_hw(x.data, padding)
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wm = w.data.reshape(cout, -1)
    out = wm @ cols
    if b is not None:
        out += b.data[:, None]
    out = np.ascontiguousarray(out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3))

    def backward(g):
        gm = g.transpose(1, 0, 2, 3).reshape(cout, -1)
        gx = gw = gb = None
        if w.requires_grad:
            gw = (gm @ cols.T).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gxp = _col2im(wm.T @ gm, xp.shape, kh, kw, stride, ho, wo)
            gx = gxp[:, :, padding : padding + h, padding : padding + wd] if padding else gxp
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._from_op(out, parents, backward)


def deconv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution. ``x``: [N,Cin,H,W], ``w``: [Cin,Cout,kh,kw].

    Output spatial size is ``(H-1)*stride - 2*padding + kh``.
    """
    _check_4d(x, "deconv2d input")
    _check_4d(w, "deconv2d weight")
    n, cin, h, wd = x.shape
    wcin, cout, kh, kw = w.shape
    if wcin != cin:
        raise DimensionError(
            f"deconv2d: input has {cin} channels but weight expects {wcin} (x {x.shape}, w {w.shape})"
        )
    if stride < 1:
        raise ValidationError(f"deconv2d: stride must be >= 1, got {stride}")
    hf, wf = (h - 1) * stride + kh, (wd - 1) * stride + kw
    ho, wo = hf - 2 * padding, wf - 2 * padding
    if ho < 1 or wo < 1:
        raise DimensionError(f"deconv2d: padding {padding} leaves no output for input {h}x{wd}")
    if b is not None and b.shape != (cout,):
        raise DimensionError(f"deconv2d: bias shape {b.shape} does not match {cout} output channels")

    xm = x.data.transpose(1, 0, 2, 3).reshape(cin, -1)
    wm = w.data.reshape(cin, -1)
    full = _col2im(wm.T @ xm, (n, cout, hf, wf), kh, kw, stride, h, wd)
    out = full[:, :, padding : padding + ho, padding : padding + wo]
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        gfull = _pad_hw(g, padding)
        gcols = _im2col(gfull, kh, kw, stride, h, wd)
        gx = gw = gb = None
        if x.requires_grad:
            gx = (wm @ gcols).reshape(cin, n, h, wd).transpose(1, 0, 2, 3)
        if w.requires_grad:
            gw = (xm @ gcols.T).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._from_op(out, parents, backward)


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    stats,
    train: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization.

    ``stats`` is any object with mutable ``mean`` and ``var`` arrays
    (see :class:`mcaer.params.RunningStats`). Train mode normalizes with the
    biased batch variance and folds the unbiased estimate into ``stats``.
    """
    _check_4d(x, "batchnorm2d input")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(
            f"batchnorm2d: gamma {gamma.shape} / beta {beta.shape} do not match {c} channels"
        )
    bshape = (1, c, 1, 1)
    if train:
        count = x.shape[0] * x.shape[2] * x.shape[3]
        mean = x.data.mean(axis=(0, 2, 3))
        centered = x.data - mean.reshape(bshape)
        var = (centered * centered).mean(axis=(0, 2, 3))
        if stats is not None:
            unbiased = var * count / (count - 1) if count > 1 else var
            if stats.mean is None:
                stats.mean = np.zeros(c, dtype=x.dtype)
                stats.var = np.ones(c, dtype=x.dtype)
            stats.mean = ((1 - momentum) * stats.mean + momentum * mean).astype(x.dtype)
            stats.var = ((1 - momentum) * stats.var + momentum * unbiased).astype(x.dtype)
    else:
        if stats is None or stats.mean is None or stats.var is None:
            raise StateError("batchnorm2d: eval mode requires initialized running statistics")
        mean = stats.mean.astype(x.dtype)
        var = stats.var.astype(x.dtype)
        centered = x.data - mean.reshape(bshape)
    invstd = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = centered * invstd.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def backward(g):
        gx = ggamma = gbeta = None
        if gamma.requires_grad:
            ggamma = (g * xhat).sum(axis=(0, 2, 3))
        if beta.requires_grad:
            gbeta = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(bshape)
            if train:
                m = x.shape[0] * x.shape[2] * x.shape[3]
                s1 = gxhat.sum(axis=(0, 2, 3)).reshape(bshape)
                s2 = (gxhat * xhat).sum(axis=(0, 2, 3)).reshape(bshape)
                gx = (invstd.reshape(bshape) / m) * (m * gxhat - s1 - xhat * s2)
            else:
                gx = gxhat * invstd.reshape(bshape)
        return gx, ggamma, gbeta

    return Tensor._from_op(out, (x, gamma, beta), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if _branch_log is not None:
        _branch_log.append(np.packbits(mask))
    return Tensor._from_op(x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    e = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return Tensor._from_op(out, (x,), lambda g: (g * out * (1.0 - out),))


def _pool_geometry(x: Tensor, k: int, stride: Optional[int], what: str) -> tuple[int, int, int]:
    _check_4d(x, what)
    stride = k if stride is None else stride
    if k < 1 or stride < 1:
        raise ValidationError(f"{what}: kernel and stride must be >= 1")
    h, w = x.shape[2:]
    if k > h or k > w:
        raise DimensionError(f"{what}: kernel {k} larger than input {h}x{w}")
    return stride, (h - k) // stride + 1, (w - k) // stride + 1


def maxpool2d(x: Tensor, k: int, stride: Optional[int] = None) -> Tensor:
    """Max pooling with floor output size; ties resolve to the first window offset."""
    s, ho, wo = _pool_geometry(x, k, stride, "maxpool2d")

    def window(o: int) -> np.ndarray:
        i, j = divmod(o, k)
        return x.data[:, :, i : i + s * ho : s, j : j + s * wo : s]

    out = window(0).copy()
    for o in range(1, k * k):
        np.maximum(out, window(o), out=out)
    if _branch_log is not None:
        winner = np.full(out.shape, k * k, dtype=np.uint8)
        for o in reversed(range(k * k)):
            winner[window(o) == out] = o
        _branch_log.append(winner)

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        taken = np.zeros(out.shape, dtype=bool)
        for o in range(k * k):
            i, j = divmod(o, k)
            hit = window(o) == out
            hit &= ~taken
            taken |= hit
            gx[:, :, i : i + s * ho : s, j : j + s * wo : s] += g * hit
        return (gx,)

    return Tensor._from_op(out, (x,), backward)


def avgpool2d(x: Tensor, k: int, stride: Optional[int] = None) -> Tensor:
    s, ho, wo = _pool_geometry(x, k, stride, "avgpool2d")
    out = np.zeros((x.shape[0], x.shape[1], ho, wo), dtype=x.dtype)
    for o in range(k * k):
        i, j = divmod(o, k)
        out += x.data[:, :, i : i + s * ho : s, j : j + s * wo : s]
    out /= k * k

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gk = g / (k * k)
        for o in range(k * k):
            i, j = divmod(o, k)
            gx[:, :, i : i + s * ho : s, j : j + s * wo : s] += gk
        return (gx,)

    return Tensor._from_op(out, (x,), backward)


def global_avgpool(x: Tensor) -> Tensor:
    """[N,C,H,W] -> [N,C]."""
    _check_4d(x, "global_avgpool")
    return x.mean(axis=(2, 3))


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    _check_4d(x, "upsample_nearest")
    if factor < 1:
        raise ValidationError(f"upsample factor must be >= 1, got {factor}")
    n, c, h, w = x.shape
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)
    return Tensor._from_op(
        out, (x,), lambda g: (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)
    )


def pad2d(x: Tensor, top: int, bottom: int, left: int, right: int) -> Tensor:
    """Zero padding of the two spatial axes."""
    _check_4d(x, "pad2d")
    h, w = x.shape[2:]
    out = np.pad(x.data, ((0, 0), (0, 0), (top, bottom), (left, right)))
    return Tensor._from_op(out, (x,), lambda g: (g[:, :, top : top + h, left : left + w],))


def center_crop(x: Tensor, h: int, w: int) -> Tensor:
    _check_4d(x, "center_crop")
    hh, ww = x.shape[2:]
    if h > hh or w > ww:
        raise DimensionError(f"center_crop: {h}x{w} exceeds input {hh}x{ww}")
    top, left = (hh - h) // 2, (ww - w) // 2
    if (top, left, h, w) == (0, 0, hh, ww):
        return x
    return x[:, :, top : top + h, left : left + w]


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x``: [N,Din], ``w``: [Dout,Din], ``b``: [Dout]."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    out = x @ w.T
    return out if b is None else out + b


def _check_axis(x: Tensor, axis: int, what: str) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"{what}: axis {axis} out of range for {x.ndim}-d tensor")
    return axis % x.ndim


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis, "softmax")
    z = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)
    return Tensor._from_op(
        out, (x,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    )


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis, "log_softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    return Tensor._from_op(
        out, (x,), lambda g: (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)
    )


def spatial_softmax(x: Tensor) -> Tensor:
    """Softmax over all spatial positions of each [N,C,H,W] map."""
    _check_4d(x, "spatial_softmax")
    n, c, h, w = x.shape
    return softmax(x.reshape(n, c, h * w), axis=2).reshape(n, c, h, w)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects [N,K] logits, got {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,) or not np.issubdtype(labels.dtype, np.integer):
        raise ValidationError(f"cross_entropy: need {n} integer labels, got {labels!r}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValidationError(f"cross_entropy: labels must lie in [0, {k}), got {labels.tolist()}")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def backward(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (g / n),)

    return Tensor._from_op(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def mse_loss(pred: Tensor, target) -> Tensor:
    target = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    if target.shape != pred.shape:
        raise DimensionError(f"mse_loss: prediction {pred.shape} vs target {target.shape}")
    diff = pred.data - target
    return Tensor._from_op(
        np.asarray((diff * diff).mean(), dtype=pred.dtype),
        (pred,),
        lambda g: (g * 2.0 * diff / diff.size,),
    )


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    axis = _check_axis(tensors[0], axis, "concat")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(a != b for d, (a, b) in enumerate(zip(t.shape, ref)) if d != axis):
            raise DimensionError(f"concat: shapes {[t.shape for t in tensors]} differ off axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._from_op(out, tuple(tensors), backward)


def scale_grad(x: Tensor, factor: float) -> Tensor:
    """Identity in the forward pass; multiplies the incoming gradient by ``factor``."""
    return Tensor._from_op(x.data, (x,), lambda g: (g * factor,))


__all__ = [
    "avgpool2d",
    "batchnorm2d",
    "branch_digest",
    "center_crop",
    "concat",
    "conv2d",
    "cross_entropy",
    "deconv2d",
    "global_avgpool",
    "linear",
    "log_softmax",
    "maxpool2d",
    "mse_loss",
    "pad2d",
    "record_branches",
    "relu",
    "scale_grad",
    "sigmoid",
    "softmax",
    "spatial_softmax",
    "unbroadcast",
    "upsample_nearest",
]
