"""Differentiable primitives built on :class:`~sttn.autograd.tensor.Function`."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Function, Tensor, _as_tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ShapeError(ValueError):
    pass


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise -------------------------------------------------------------

class _Add(Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx.shapes = a.shape, b.shape
        return a + b

    @staticmethod
    def backward(ctx, g):
        sa, sb = ctx.shapes
        return _unbroadcast(g, sa), _unbroadcast(g, sb)


class _Sub(Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx.shapes = a.shape, b.shape
        return a - b

    @staticmethod
    def backward(ctx, g):
        sa, sb = ctx.shapes
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)


class _Mul(Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx.a, ctx.b = a, b
        return a * b

    @staticmethod
    def backward(ctx, g):
        return _unbroadcast(g * ctx.b, ctx.a.shape), _unbroadcast(g * ctx.a, ctx.b.shape)


class _Neg(Function):
    @staticmethod
    def forward(ctx, a):
        return -a

    @staticmethod
    def backward(ctx, g):
        return -g


class _Pow(Function):
    @staticmethod
    def forward(ctx, a, exponent):
        ctx.a, ctx.p = a, exponent
        return a ** exponent

    @staticmethod
    def backward(ctx, g):
        return g * ctx.p * ctx.a ** (ctx.p - 1)


class _Sum(Function):
    @staticmethod
    def forward(ctx, a, axis=None):
        ctx.shape, ctx.axis = a.shape, axis
        return np.asarray(a.sum(axis=axis))

    @staticmethod
    def backward(ctx, g):
        if ctx.axis is not None:
            g = np.expand_dims(g, ctx.axis)
        return np.broadcast_to(g, ctx.shape).copy()


class _Reshape(Function):
    @staticmethod
    def forward(ctx, a, shape):
        ctx.shape = a.shape
        return a.reshape(shape)

    @staticmethod
    def backward(ctx, g):
        return g.reshape(ctx.shape)


class _MatMul(Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx.a, ctx.b = a, b
        return a @ b

    @staticmethod
    def backward(ctx, g):
        return g @ ctx.b.T, ctx.a.T @ g


class _Relu(Function):
    @staticmethod
    def forward(ctx, x):
        ctx.mask = x > 0
        return np.where(ctx.mask, x, 0).astype(x.dtype)

    @staticmethod
    def backward(ctx, g):
        return g * ctx.mask


def _wrap(x, like):
    return _as_tensor(x, like if isinstance(like, Tensor) else None)


def add(a, b):
    return _Add.apply(_wrap(a, b), _wrap(b, a))


def sub(a, b):
    return _Sub.apply(_wrap(a, b), _wrap(b, a))


def mul(a, b):
    return _Mul.apply(_wrap(a, b), _wrap(b, a))


def neg(a):
    return _Neg.apply(a)


def power(a, exponent: float):
    return _Pow.apply(a, exponent=exponent)


def sum(a, axis=None):  # noqa: A001 - mirrors numpy naming
    return _Sum.apply(a, axis=axis)


def mean(a, axis=None):
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum(a, axis=axis), 1.0 / n)


def reshape(a, shape):
    return _Reshape.apply(a, shape=tuple(shape))


def flatten(a):
    return reshape(a, (a.shape[0], -1))


def matmul(a, b):
    return _MatMul.apply(a, b)


def relu(x):
    return _Relu.apply(x)


# -- convolution -------------------------------------------------------------

def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise ShapeError(
            f"non-integral output size: ({size} + 2*{pad} - {k}) / {stride} + 1"
        )
    return span // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Unfold ``x`` (N, C, H, W) into rows of shape (N*Ho*Wo, C*kh*kw).

    One row per output position, ordered (n, oy, ox); within a row the layout
    is channel-major: index = (c*kh + i)*kw + j.
    """
    n, c, h, w = x.shape
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (N, C, Ho, Wo, kh, kw) -> (N, Ho, Wo, C, kh, kw)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)


def col2im(cols: np.ndarray, shape, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add rows back into an (N, C, H, W) array."""
    n, c, h, w = shape
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    # (N, Ho, Wo, C, kh, kw) -> (kh, kw, N, C, Ho, Wo) so each tap is one contiguous block
    taps = np.ascontiguousarray(cols.reshape(n, ho, wo, c, kh, kw).transpose(4, 5, 0, 3, 1, 2))
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += taps[i, j]
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return out


class _Conv2d(Function):
    """Cross-correlation of one input with one or more kernels, summing the branches.

    Every branch is its own GEMM against the shared im2col matrix.
    """

    @staticmethod
    def forward(ctx, x, *kernels, stride=1, pad=0):
        w = kernels[0]
        if x.ndim != 4 or any(k.ndim != 4 for k in kernels):
            raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {w.shape}")
        if any(k.shape != w.shape for k in kernels):
            raise ShapeError("all branch kernels must share one shape")
        if x.shape[1] != w.shape[1]:
            raise ShapeError(f"input has {x.shape[1]} channels, kernel expects {w.shape[1]}")
        if stride < 1 or pad < 0:
            raise ShapeError(f"invalid stride={stride} / pad={pad}")
        n = x.shape[0]
        o, c, kh, kw = w.shape
        ho = conv_output_size(x.shape[2], kh, stride, pad)
        wo = conv_output_size(x.shape[3], kw, stride, pad)
        cols = im2col(x, kh, kw, stride, pad)
        wmats = [k.reshape(o, -1) for k in kernels]
        out = cols @ wmats[0].T
        for wm in wmats[1:]:
            out += cols @ wm.T
        ctx.cols, ctx.wmats, ctx.xshape, ctx.wshape = cols, wmats, x.shape, w.shape
        ctx.geom = (kh, kw, stride, pad)
        return np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    @staticmethod
    def backward(ctx, g):
        o = ctx.wshape[0]
        grows = g.transpose(0, 2, 3, 1).reshape(-1, o)
        need = ctx.needs_input_grad
        gws = []
        shared = None
        for i in range(len(ctx.wmats)):
            if need[i + 1]:
                if shared is None:
                    shared = (grows.T @ ctx.cols).reshape(ctx.wshape)
                gws.append(shared)  # every branch sees the same input and upstream gradient
            else:
                gws.append(None)
        gx = None
        if need[0]:
            wsum = ctx.wmats[0] if len(ctx.wmats) == 1 else np.sum(ctx.wmats, axis=0)
            gx = col2im(grows @ wsum, ctx.xshape, *ctx.geom)
        return (gx, *gws)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (N, C, H, W) with ``kernel`` (n, C, kh, kw)."""
    return _Conv2d.apply(x, kernel, stride=stride, pad=pad)


def branch_conv2d(x: Tensor, kernels, stride: int = 1, pad: int = 0) -> Tensor:
    """``sum_k conv2d(x, kernels[k])`` computed as separate GEMMs over one im2col."""
    return _Conv2d.apply(x, *kernels, stride=stride, pad=pad)


class _Linear(Function):
    @staticmethod
    def forward(ctx, x, *weights, bias=False):
        ws = weights[:-1] if bias else weights
        if x.ndim != 2 or any(x.shape[1] != w.shape[1] for w in ws):
            raise ShapeError(f"linear: input {x.shape} incompatible with weight {ws[0].shape}")
        ctx.x, ctx.ws, ctx.bias = x, ws, bias
        out = x @ ws[0].T
        for w in ws[1:]:
            out += x @ w.T
        return out + weights[-1] if bias else out

    @staticmethod
    def backward(ctx, g):
        wsum = ctx.ws[0] if len(ctx.ws) == 1 else np.sum(ctx.ws, axis=0)
        gx = g @ wsum if ctx.needs_input_grad[0] else None
        gw = g.T @ ctx.x
        grads = (gx,) + (gw,) * len(ctx.ws)
        return grads + (g.sum(axis=0),) if ctx.bias else grads


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` with ``w`` shaped (out, in)."""
    if b is None:
        return _Linear.apply(x, w)
    return _Linear.apply(x, w, b, bias=True)


def branch_linear(x: Tensor, weights) -> Tensor:
    """``sum_k x @ weights[k].T`` as separate products."""
    return _Linear.apply(x, *weights)


# -- normalization -------------------------------------------------------------

def _bn_axes(x: np.ndarray) -> tuple[int, ...]:
    if x.ndim == 4:
        return (0, 2, 3)
    if x.ndim == 2:
        return (0,)
    raise ShapeError(f"batch norm expects 2-d or 4-d input, got {x.shape}")


def _bn_view(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape(1, -1, 1, 1) if ndim == 4 else v.reshape(1, -1)


class _BatchNormTrain(Function):
    @staticmethod
    def forward(ctx, x, gamma, beta, eps=BN_EPS):
        axes = _bn_axes(x)
        mu = x.mean(axis=axes)
        var = x.var(axis=axes)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x - _bn_view(mu, x.ndim)) * _bn_view(inv, x.ndim)
        ctx.xhat, ctx.inv, ctx.gamma, ctx.axes = xhat, inv.astype(x.dtype), gamma, axes
        ctx.mu, ctx.var = mu, var
        return (xhat * _bn_view(gamma, x.ndim) + _bn_view(beta, x.ndim)).astype(x.dtype)

    @staticmethod
    def backward(ctx, g):
        axes, xhat, nd = ctx.axes, ctx.xhat, g.ndim
        m = g.size // g.shape[1]
        gbeta = g.sum(axis=axes)
        ggamma = (g * xhat).sum(axis=axes)
        gxhat = g * _bn_view(ctx.gamma, nd)
        gx = (_bn_view(ctx.inv, nd) / m) * (
            m * gxhat - _bn_view(gxhat.sum(axis=axes), nd) - xhat * _bn_view((gxhat * xhat).sum(axis=axes), nd)
        )
        return gx, ggamma, gbeta


class _BatchNormEval(Function):
    @staticmethod
    def forward(ctx, x, gamma, beta, mean=None, var=None, eps=BN_EPS):
        _bn_axes(x)
        scale = gamma / np.sqrt(var + eps)
        shift = beta - mean * scale
        ctx.scale, ctx.x, ctx.axes = scale.astype(x.dtype), x, _bn_axes(x)
        ctx.xhat = (x - _bn_view(mean, x.ndim)) / _bn_view(np.sqrt(var + eps), x.ndim)
        return (x * _bn_view(scale, x.ndim) + _bn_view(shift, x.ndim)).astype(x.dtype)

    @staticmethod
    def backward(ctx, g):
        return g * _bn_view(ctx.scale, g.ndim), (g * ctx.xhat).sum(axis=ctx.axes), g.sum(axis=ctx.axes)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    """Batch normalization over channel axis 1 of a 2-d or 4-d input.

    In training mode batch statistics are used and the running buffers are
    updated in place (unbiased variance, as is customary); in eval mode the
    running buffers define a fixed affine map.
    """
    if training:
        out = _BatchNormTrain.apply(x, gamma, beta, eps=eps)
        axes = _bn_axes(x.data)
        m = x.size // x.shape[1]
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes) * (m / max(m - 1, 1))
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var
        return out
    return _BatchNormEval.apply(x, gamma, beta, mean=running_mean, var=running_var, eps=eps)


# -- pooling -------------------------------------------------------------------

class _MaxPool2d(Function):
    @staticmethod
    def forward(ctx, x, kernel=2, stride=None):
        stride = stride or kernel
        n, c, h, w = x.shape
        ho = conv_output_size(h, kernel, stride, 0)
        wo = conv_output_size(w, kernel, stride, 0)
        if stride == kernel:
            win = x.reshape(n, c, ho, kernel, wo, kernel).transpose(0, 1, 2, 4, 3, 5)
        else:
            win = sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
        flat = win.reshape(n, c, ho, wo, kernel * kernel)
        arg = flat.argmax(axis=-1)
        ctx.arg, ctx.shape, ctx.geom = arg, x.shape, (kernel, stride, ho, wo)
        return np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    @staticmethod
    def backward(ctx, g):
        k, s, ho, wo = ctx.geom
        n, c = ctx.shape[:2]
        if s == k:
            gx = np.zeros((n, c, ho, k, wo, k), dtype=g.dtype)
            di, dj = np.divmod(ctx.arg, k)
            ni, ci, yi, xi = np.indices((n, c, ho, wo), sparse=True)
            gx[ni, ci, yi, di, xi, dj] = g
            return gx.reshape(ctx.shape)
        gx = np.zeros(ctx.shape, dtype=g.dtype)
        di, dj = np.divmod(ctx.arg, k)
        ni, ci, yi, xi = np.indices((n, c, ho, wo), sparse=True)
        np.add.at(gx, (ni, ci, yi * s + di, xi * s + dj), g)
        return gx


def max_pool2d(x: Tensor, kernel: int = 2, stride: int | None = None) -> Tensor:
    return _MaxPool2d.apply(x, kernel=kernel, stride=stride)


def global_avg_pool(x: Tensor) -> Tensor:
    return mean(x, axis=(2, 3))


class _PadChannels(Function):
    @staticmethod
    def forward(ctx, x, out_channels=None):
        ctx.c = x.shape[1]
        extra = out_channels - x.shape[1]
        if extra < 0:
            raise ShapeError(f"cannot pad {x.shape[1]} channels down to {out_channels}")
        return np.pad(x, ((0, 0), (0, extra), (0, 0), (0, 0)))

    @staticmethod
    def backward(ctx, g):
        return np.ascontiguousarray(g[:, :ctx.c])


def pad_channels(x: Tensor, out_channels: int) -> Tensor:
    """Zero-pad the channel axis; used by parameter-free residual shortcuts."""
    if x.shape[1] == out_channels:
        return x
    return _PadChannels.apply(x, out_channels=out_channels)


# -- loss ------------------------------------------------------------------------

class _SoftmaxCrossEntropy(Function):
    @staticmethod
    def forward(ctx, logits, labels=None):
        if logits.ndim != 2 or labels.shape != (logits.shape[0],):
            raise ShapeError(f"logits {logits.shape} and labels {labels.shape} disagree")
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        n = logits.shape[0]
        ctx.p, ctx.labels = np.exp(logp), labels
        return np.asarray(-logp[np.arange(n), labels].mean(), dtype=logits.dtype)

    @staticmethod
    def backward(ctx, g):
        n = ctx.p.shape[0]
        d = ctx.p.copy()
        d[np.arange(n), ctx.labels] -= 1
        return d * (g / n)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    return _SoftmaxCrossEntropy.apply(logits, labels=np.asarray(labels, dtype=np.int64))
