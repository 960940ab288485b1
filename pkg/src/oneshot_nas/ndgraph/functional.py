"""Differentiable array operations over :class:`Tensor`.

Image tensors use (batch, channels, height, width) layout. Every function
records a backward closure when an input requires grad.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .tensor import ShapeError, Tensor, make_result


def _pair(v) -> tuple:
    return (v, v) if np.isscalar(v) else tuple(v)


def _out_size(n: int, k: int, stride: int, pad: int, dilation: int = 1) -> int:
    return (n + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def _check_same(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return make_result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return make_result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    return make_result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def add_n(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ShapeError("add_n needs at least one tensor")
    for x in xs[1:]:
        _check_same(xs[0], x, "add_n")
    out = xs[0].data.copy()
    for x in xs[1:]:
        out += x.data
    return make_result(out, tuple(xs), lambda g: (g,) * len(xs))


def mul_const(x: Tensor, c) -> Tensor:
    """Multiply by a constant (scalar or broadcastable array, no gradient)."""
    c = np.asarray(c, dtype=x.data.dtype)
    out = x.data * c
    if out.shape != x.shape:
        raise ShapeError(f"mul_const may not broadcast x {x.shape} against {c.shape}")
    return make_result(out, (x,), lambda g: (g * c,))


def scale_by(x: Tensor, s: Tensor) -> Tensor:
    """Multiply a tensor by a differentiable scalar."""
    if s.data.size != 1:
        raise ShapeError(f"scale_by needs a scalar, got {s.shape}")
    sv = s.data.reshape(()).astype(x.data.dtype)

    def bw(g):
        return g * sv, np.asarray(np.vdot(g, x.data), dtype=s.data.dtype).reshape(s.shape)

    return make_result(x.data * sv, (x, s), bw)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return make_result(out, (x,), lambda g: (np.where(out > 0, g, 0).astype(g.dtype, copy=False),))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return make_result(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return make_result(np.asarray(x.data.mean()), (x,), lambda g: (np.full(x.shape, g / n, dtype=x.data.dtype),))


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result(np.concatenate([x.data for x in xs], axis=axis), tuple(xs), bw)


def weighted_sum(xs: Sequence[Tensor], w: Tensor) -> Tensor:
    """``sum_i w[i] * xs[i]`` with ``w`` a differentiable vector."""
    if w.data.ndim != 1 or w.shape[0] != len(xs):
        raise ShapeError(f"weighted_sum: {len(xs)} tensors but weights of shape {w.shape}")
    for x in xs[1:]:
        _check_same(xs[0], x, "weighted_sum")
    wv = w.data.astype(xs[0].data.dtype)
    out = np.zeros_like(xs[0].data)
    for wi, x in zip(wv, xs):
        out += wi * x.data

    def bw(g):
        gw = np.array([np.vdot(g, x.data) for x in xs], dtype=w.data.dtype)
        return (*(g * wi for wi in wv), gw)

    return make_result(out, (*xs, w), bw)


# ---------------------------------------------------------------- small vectors

def softmax(v: Tensor) -> Tensor:
    """Numerically stable softmax of a 1-D tensor."""
    if v.data.ndim != 1:
        raise ShapeError(f"softmax expects a vector, got {v.shape}")
    if not np.all(np.isfinite(v.data)):
        raise ValueError("softmax received non-finite logits")
    z = v.data - v.data.max()
    e = np.exp(z)
    p = e / e.sum()

    def bw(g):
        return (p * (g - np.dot(g, p)),)

    return make_result(p, (v,), bw)


def matvec_const(m: np.ndarray, v: Tensor) -> Tensor:
    """Product of a constant matrix with a differentiable vector."""
    m = np.asarray(m, dtype=v.data.dtype)
    return make_result(m @ v.data, (v,), lambda g: (m.T @ g,))


def outer(a: Tensor, b: Tensor) -> Tensor:
    return make_result(np.outer(a.data, b.data), (a, b), lambda g: (g @ b.data, g.T @ a.data))


# ---------------------------------------------------------------- convolutions

def _window(xp: np.ndarray, p: int, q: int, ho: int, wo: int, stride, dilation) -> tuple:
    sh, sw = stride
    r0, c0 = p * dilation, q * dilation
    return (slice(None), slice(None), slice(r0, r0 + sh * (ho - 1) + 1, sh), slice(c0, c0 + sw * (wo - 1) + 1, sw))


def conv2d(x: Tensor, w: Tensor, stride=1, padding=0, dilation: int = 1) -> Tensor:
    """Dense 2-D cross-correlation; ``w`` has shape (C_out, C_in, kh, kw)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D x and w, got {x.shape}, {w.shape}")
    b, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d: input has {cin} channels, kernel expects {cin_w}")
    stride, padding = _pair(stride), _pair(padding)
    ho = _out_size(h, kh, stride[0], padding[0], dilation)
    wo = _out_size(wd, kw, stride[1], padding[1], dilation)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: input {x.shape} too small for kernel {w.shape}")
    ph, pw = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    wdat = w.data

    if kh == kw == 1 and stride == (1, 1):
        acc = np.tensordot(wdat[:, :, 0, 0], xp, axes=(1, 1))
    else:
        acc = np.zeros((cout, b, ho, wo), dtype=np.result_type(x.data, wdat))
        for p in range(kh):
            for q in range(kw):
                xs = xp[_window(xp, p, q, ho, wo, stride, dilation)]
                acc += np.tensordot(wdat[:, :, p, q], xs, axes=(1, 1))
    out = np.ascontiguousarray(acc.transpose(1, 0, 2, 3))

    if kh == kw == 1 and stride == (1, 1):
        def bw(g):
            gw = np.tensordot(g, xp, axes=([0, 2, 3], [0, 2, 3]))[:, :, None, None] if w.requires_grad else None
            gx = np.tensordot(wdat[:, :, 0, 0], g, axes=(0, 1)).transpose(1, 0, 2, 3) if x.requires_grad else None
            return gx, gw

        return make_result(out, (x, w), bw)

    def bw(g):
        gt = g.transpose(1, 0, 2, 3)
        need_w, need_x = w.requires_grad, x.requires_grad
        gw = np.zeros_like(wdat) if need_w else None
        gxp = np.zeros_like(xp) if need_x else None
        for p in range(kh):
            for q in range(kw):
                sl = _window(xp, p, q, ho, wo, stride, dilation)
                if need_w:
                    gw[:, :, p, q] = np.tensordot(gt, xp[sl], axes=([1, 2, 3], [0, 2, 3]))
                if need_x:
                    gxp[sl] += np.tensordot(wdat[:, :, p, q], gt, axes=(0, 0)).transpose(1, 0, 2, 3)
        if not need_x:
            return None, gw
        gx = gxp[:, :, ph:ph + h, pw:pw + wd] if (ph or pw) else gxp
        return gx, gw

    return make_result(out, (x, w), bw)


def depthwise_conv2d(x: Tensor, w: Tensor, stride=1, padding=0, dilation: int = 1) -> Tensor:
    """Per-channel 2-D cross-correlation; ``w`` has shape (C, kh, kw)."""
    if x.ndim != 4 or w.ndim != 3:
        raise ShapeError(f"depthwise_conv2d expects 4-D x and 3-D w, got {x.shape}, {w.shape}")
    b, c, h, wd = x.shape
    if w.shape[0] != c:
        raise ShapeError(f"depthwise_conv2d: input has {c} channels, kernel has {w.shape[0]}")
    _, kh, kw = w.shape
    stride, padding = _pair(stride), _pair(padding)
    ho = _out_size(h, kh, stride[0], padding[0], dilation)
    wo = _out_size(wd, kw, stride[1], padding[1], dilation)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"depthwise_conv2d: input {x.shape} too small for kernel {w.shape}")
    ph, pw = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    wdat = w.data
    out = np.zeros((b, c, ho, wo), dtype=np.result_type(x.data, wdat))
    for p in range(kh):
        for q in range(kw):
            out += wdat[None, :, p, q, None, None] * xp[_window(xp, p, q, ho, wo, stride, dilation)]

    def bw(g):
        need_w, need_x = w.requires_grad, x.requires_grad
        gw = np.zeros_like(wdat) if need_w else None
        gxp = np.zeros_like(xp) if need_x else None
        for p in range(kh):
            for q in range(kw):
                sl = _window(xp, p, q, ho, wo, stride, dilation)
                if need_w:
                    gw[:, p, q] = np.einsum("bchw,bchw->c", g, xp[sl])
                if need_x:
                    gxp[sl] += wdat[None, :, p, q, None, None] * g
        if not need_x:
            return None, gw
        gx = gxp[:, :, ph:ph + h, pw:pw + wd] if (ph or pw) else gxp
        return gx, gw

    return make_result(out, (x, w), bw)


# ---------------------------------------------------------------- pooling

def max_pool2d(x: Tensor, kernel: int = 3, stride: int = 1, padding: int = 1) -> Tensor:
    b, c, h, wd = x.shape
    ho = _out_size(h, kernel, stride, padding)
    wo = _out_size(wd, kernel, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    st = (stride, stride)
    slices = [_window(xp, p, q, ho, wo, st, 1) for p in range(kernel) for q in range(kernel)]
    wins = np.stack([xp[sl] for sl in slices])
    arg = wins.argmax(axis=0)
    out = np.take_along_axis(wins, arg[None], axis=0)[0]
    del wins

    def bw(g):
        gxp = np.zeros_like(xp)
        for i, sl in enumerate(slices):
            gxp[sl] += g * (arg == i)
        return (gxp[:, :, padding:padding + h, padding:padding + wd],)

    return make_result(out, (x,), bw)


def avg_pool2d(x: Tensor, kernel: int = 3, stride: int = 1, padding: int = 1) -> Tensor:
    """Average pooling that ignores padded positions in the divisor."""
    b, c, h, wd = x.shape
    ho = _out_size(h, kernel, stride, padding)
    wo = _out_size(wd, kernel, stride, padding)
    pads = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    xp = np.pad(x.data, pads)
    ones = np.pad(np.ones((1, 1, h, wd), dtype=x.data.dtype), pads)
    st = (stride, stride)
    slices = [_window(xp, p, q, ho, wo, st, 1) for p in range(kernel) for q in range(kernel)]
    total = np.zeros((b, c, ho, wo), dtype=x.data.dtype)
    count = np.zeros((1, 1, ho, wo), dtype=x.data.dtype)
    for sl in slices:
        total += xp[sl]
        count += ones[sl]
    out = total / count

    def bw(g):
        gxp = np.zeros_like(xp)
        gc = g / count
        for sl in slices:
            gxp[sl] += gc
        return (gxp[:, :, padding:padding + h, padding:padding + wd],)

    return make_result(out, (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    b, c, h, wd = x.shape
    n = h * wd

    def bw(g):
        return (np.broadcast_to(g[:, :, None, None] / n, x.shape).copy(),)

    return make_result(x.data.mean(axis=(2, 3)), (x,), bw)


def shift_pad(x: Tensor) -> Tensor:
    """Shift one pixel up-left, zero-filling the last row and column."""
    out = np.zeros_like(x.data)
    out[:, :, :-1, :-1] = x.data[:, :, 1:, 1:]

    def bw(g):
        gx = np.zeros_like(g)
        gx[:, :, 1:, 1:] = g[:, :, :-1, :-1]
        return (gx,)

    return make_result(out, (x,), bw)


# ---------------------------------------------------------------- normalization

def batch_norm(x: Tensor, gamma: Optional[Tensor] = None, beta: Optional[Tensor] = None,
               eps: float = 1e-5) -> Tensor:
    """Per-channel normalization using the statistics of the current batch."""
    if x.ndim != 4:
        raise ShapeError(f"batch_norm expects 4-D input, got {x.shape}")
    axes = (0, 2, 3)
    n = x.shape[0] * x.shape[2] * x.shape[3]
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    affine = gamma is not None
    if affine:
        gv = gamma.data.reshape(1, -1, 1, 1)
        out = xhat * gv + beta.data.reshape(1, -1, 1, 1)
        parents = (x, gamma, beta)
    else:
        out = xhat
        parents = (x,)

    def bw(g):
        gg = g * gv if affine else g
        s1 = gg.sum(axis=axes, keepdims=True)
        s2 = (gg * xhat).sum(axis=axes, keepdims=True)
        gx = inv * (gg - s1 / n - xhat * s2 / n)
        if affine:
            return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)
        return (gx,)

    return make_result(out, parents, bw)


# ---------------------------------------------------------------- heads and losses

def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w.T + b`` with ``w`` of shape (out, in)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: cannot apply weight {w.shape} to input {x.shape}")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data

    def bw(g):
        grads = (g @ w.data, g.T @ x.data)
        return grads + (g.sum(axis=0),) if b is not None else grads

    return make_result(out, (x, w, b) if b is not None else (x, w), bw)


def log_softmax_rows(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=1, keepdims=True))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"cross_entropy: labels must lie in [0, {k})")
    idx = np.arange(labels.shape[0])
    logp = log_softmax_rows(logits.data)
    loss = -logp[idx, labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[idx, labels] -= 1.0
        return (p * (g / labels.shape[0]),)

    return make_result(np.asarray(loss), (logits,), bw)
