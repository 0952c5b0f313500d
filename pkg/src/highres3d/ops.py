"""Layer primitives with hand-written backward rules.

Every op works on single examples in (C, D, H, W) layout. The array-level
functions (``conv3d_forward`` ...) are usable on their own; the ``Tensor``
wrappers below them record the tape.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product

import numpy as np

from .tensor import ShapeError, Tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
CONV_METHODS = ("direct", "gemm", "split")


# ----------------------------------------------------------------------
# dilated 3D convolution
#
# out[o, x] = sum_{m, t} w[o, m, t] * in[m, x + (t - c) * r]
# with t running over the k^3 taps and c = (k - 1) // 2, i.e. the window is
# centred on the output voxel. Under "same" padding the input is extended
# with zeros; under "valid" each spatial extent shrinks by (k - 1) * r.


def _check_conv(x: np.ndarray, w: np.ndarray, r: int, padding: str) -> int:
    if x.ndim != 4 or w.ndim != 5:
        raise ShapeError(f"conv3d expects (C,D,H,W) input and (O,C,k,k,k) weights, got {x.shape}, {w.shape}")
    k = w.shape[2]
    if w.shape[2:] != (k, k, k) or k not in (1, 3):
        raise ShapeError(f"kernel extent must be 1 or 3 in every dim, got {w.shape[2:]}")
    if w.shape[1] != x.shape[0]:
        raise ShapeError(f"channel mismatch: input has {x.shape[0]}, kernel expects {w.shape[1]}")
    if r < 1:
        raise ValueError(f"dilation must be >= 1, got {r}")
    if padding not in ("same", "valid"):
        raise ValueError(f"unknown padding {padding!r}")
    span = (k - 1) * r + 1
    if padding == "valid" and min(x.shape[1:]) < span:
        raise ShapeError(f"input {x.shape[1:]} smaller than the dilated kernel span {span}")
    return k


def _pad_input(x: np.ndarray, k: int, r: int, padding: str) -> np.ndarray:
    half = (k - 1) // 2 * r
    if padding == "valid" or half == 0:
        return x
    return np.pad(x, ((0, 0), (half, half), (half, half), (half, half)))


def _taps(k: int, r: int):
    return [(i * r, j * r, l * r) for i, j, l in product(range(k), repeat=3)]


def _out_spatial(xp: np.ndarray, k: int, r: int) -> tuple[int, int, int]:
    span = (k - 1) * r
    return tuple(s - span for s in xp.shape[1:])


def _im2col(xp: np.ndarray, k: int, r: int) -> np.ndarray:
    # rows ordered (channel, tap) to match w.reshape(O, C * k^3)
    d, h, wd = _out_spatial(xp, k, r)
    c = xp.shape[0]
    cols = np.empty((c, k ** 3, d * h * wd), dtype=xp.dtype)
    for t, (a, b, e) in enumerate(_taps(k, r)):
        cols[:, t, :] = xp[:, a:a + d, b:b + h, e:e + wd].reshape(c, -1)
    return cols.reshape(c * k ** 3, -1)


def _col2im(cols: np.ndarray, xp_shape, k: int, r: int) -> np.ndarray:
    c = xp_shape[0]
    d, h, wd = (s - (k - 1) * r for s in xp_shape[1:])
    cols = cols.reshape(c, k ** 3, d, h, wd)
    out = np.zeros(xp_shape, dtype=cols.dtype)
    for t, (a, b, e) in enumerate(_taps(k, r)):
        out[:, a:a + d, b:b + h, e:e + wd] += cols[:, t]
    return out


def _forward_direct(xp, w, k, r):
    o, c = w.shape[:2]
    d, h, wd = _out_spatial(xp, k, r)
    wt = np.ascontiguousarray(np.moveaxis(w.reshape(o, c, k ** 3), 2, 0))
    out = np.zeros((o, d * h * wd), dtype=xp.dtype)
    for t, (a, b, e) in enumerate(_taps(k, r)):
        patch = xp[:, a:a + d, b:b + h, e:e + wd].reshape(c, -1)
        out += wt[t] @ patch
    return out.reshape(o, d, h, wd)


def _forward_gemm(xp, w, k, r):
    o = w.shape[0]
    d, h, wd = _out_spatial(xp, k, r)
    return (w.reshape(o, -1) @ _im2col(xp, k, r)).reshape(o, d, h, wd)


def _forward_split(xp, w, k, r):
    # split-and-merge: the r^3 phase-subsampled grids of the padded input are
    # each convolved with the undilated kernel, then interleaved back.
    if r == 1 or k == 1:
        return _forward_gemm(xp, w, k, 1 if k == 1 else r)
    o = w.shape[0]
    out_shape = _out_spatial(xp, k, r)
    out = np.empty((o,) + out_shape, dtype=xp.dtype)
    for pa, pb, pc in product(range(r), repeat=3):
        sub = xp[:, pa::r, pb::r, pc::r]
        n = [len(range(p, s, r)) for p, s in zip((pa, pb, pc), out_shape)]
        if min(n) == 0:
            continue
        res = _forward_gemm(np.ascontiguousarray(sub), w, k, 1)
        out[:, pa::r, pb::r, pc::r] = res[:, :n[0], :n[1], :n[2]]
    return out


def conv3d_forward(x: np.ndarray, w: np.ndarray, dilation: int = 1,
                   padding: str = "same", method: str = "direct") -> np.ndarray:
    """Dilated 3D convolution of one (C_in, D, H, W) volume."""
    k = _check_conv(x, w, dilation, padding)
    xp = _pad_input(x, k, dilation, padding)
    if method == "direct":
        return _forward_direct(xp, w, k, dilation)
    if method == "gemm":
        return _forward_gemm(xp, w, k, dilation)
    if method == "split":
        return _forward_split(xp, w, k, dilation)
    raise ValueError(f"unknown conv method {method!r}, expected one of {CONV_METHODS}")


def conv3d_backward(grad_out: np.ndarray, x: np.ndarray, w: np.ndarray, dilation: int = 1,
                    padding: str = "same") -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``sum(grad_out * conv3d_forward(x, w))`` w.r.t. ``x`` and ``w``."""
    k = _check_conv(x, w, dilation, padding)
    xp = _pad_input(x, k, dilation, padding)
    o = w.shape[0]
    expect = (o,) + _out_spatial(xp, k, dilation)
    if grad_out.shape != expect:
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match forward output {expect}")
    c = x.shape[0]
    d, h, wd = expect[1:]
    g = grad_out.reshape(o, -1)
    wt = np.moveaxis(w.reshape(o, c, k ** 3), 2, 0)
    gw = np.empty((k ** 3, o, c), dtype=w.dtype)
    gxp = np.zeros(xp.shape, dtype=x.dtype)
    for t, (a, b, e) in enumerate(_taps(k, dilation)):
        patch = xp[:, a:a + d, b:b + h, e:e + wd].reshape(c, -1)
        gw[t] = g @ patch.T
        gxp[:, a:a + d, b:b + h, e:e + wd] += (np.ascontiguousarray(wt[t].T) @ g).reshape(c, d, h, wd)
    gw = np.ascontiguousarray(np.moveaxis(gw, 0, 2)).reshape(w.shape)
    if gxp.shape != x.shape:
        half = (k - 1) // 2 * dilation
        gxp = gxp[:, half:-half, half:-half, half:-half]
    return np.ascontiguousarray(gxp), gw


def conv3d(x: Tensor, w: Tensor, dilation: int = 1, padding: str = "same",
           bias: Tensor | None = None, method: str = "direct") -> Tensor:
    out = conv3d_forward(x.data, w.data, dilation, padding, method)
    if bias is not None:
        out = out + bias.data.reshape(-1, 1, 1, 1)

    def back(g):
        gx, gw = conv3d_backward(g, x.data, w.data, dilation, padding)
        grads = [gx if x.requires_grad else None, gw]
        if bias is not None:
            grads.append(g.sum(axis=(1, 2, 3)))
        return grads

    parents = (x, w) if bias is None else (x, w, bias)
    return Tensor._make(out, parents, back, f"conv3d(r={dilation})")


# ----------------------------------------------------------------------
# batch normalisation over the spatial positions of one example


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM
    mode: str = "train"

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32, **kw) -> BatchNormState:
        return cls(np.ones(channels, dtype), np.zeros(channels, dtype),
                   np.zeros(channels, dtype), np.ones(channels, dtype), **kw)


@dataclass
class BatchStats:
    """Per-channel statistics observed in a training-mode forward pass."""
    mean: np.ndarray
    var: np.ndarray
    count: int = field(default=1)


def update_running(running_mean: np.ndarray, running_var: np.ndarray, stats: BatchStats,
                   momentum: float = BN_MOMENTUM) -> tuple[np.ndarray, np.ndarray]:
    m = momentum * running_mean + (1 - momentum) * stats.mean
    v = momentum * running_var + (1 - momentum) * stats.var
    return m.astype(running_mean.dtype), v.astype(running_var.dtype)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
              running_var: np.ndarray, mode: str = "train", eps: float = BN_EPS,
              stats_out: list | None = None) -> Tensor:
    """Train mode normalises with the statistics of ``x`` and appends a
    :class:`BatchStats` to ``stats_out``; inference mode uses the running values."""
    c = x.shape[0]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm: {c} channels but affine params of shape {gamma.shape}")
    n = int(np.prod(x.shape[1:]))
    if n == 0:
        raise ShapeError("batchnorm over an empty spatial volume")
    bshape = (c,) + (1,) * (x.ndim - 1)
    a = x.data
    g_ = gamma.data.reshape(bshape)
    if mode == "train":
        axes = tuple(range(1, a.ndim))
        mean = a.mean(axis=axes, keepdims=True)
        centred = a - mean
        var = (centred * centred).mean(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = centred * inv
        if stats_out is not None:
            unbiased = var.reshape(c) * (n / max(n - 1, 1))
            stats_out.append(BatchStats(mean.reshape(c).copy(), unbiased))

        def back(g):
            gb = g.sum(axis=axes)
            gg = (g * xhat).sum(axis=axes)
            gx = (g_ * inv) * (g - gb.reshape(bshape) / n - xhat * (gg.reshape(bshape) / n))
            return gx.astype(a.dtype), gg.astype(a.dtype), gb.astype(a.dtype)
    elif mode == "inference":
        inv = (1.0 / np.sqrt(running_var.astype(a.dtype) + eps)).reshape(bshape)
        xhat = (a - running_mean.astype(a.dtype).reshape(bshape)) * inv

        def back(g):
            axes = tuple(range(1, g.ndim))
            return (g * (g_ * inv)).astype(a.dtype), (g * xhat).sum(axis=axes), g.sum(axis=axes)
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    out = (xhat * g_ + beta.data.reshape(bshape)).astype(a.dtype)
    return Tensor._make(out, (x, gamma, beta), back, f"batchnorm({mode})")


# ----------------------------------------------------------------------


def softmax_channels(x: Tensor) -> Tensor:
    if x.shape[0] < 2:
        raise ShapeError("softmax over channels needs at least 2 channels")
    a = x.data
    e = np.exp(a - a.max(axis=0, keepdims=True))
    s = e / e.sum(axis=0, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=0, keepdims=True)),)

    return Tensor._make(s, (x,), back, "softmax")


@dataclass
class DropoutMask:
    keep_prob: float
    mask: np.ndarray | None = None


def dropout_mask(shape, keep_prob: float, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Inverted-dropout multipliers: 1/p with probability p, otherwise 0."""
    if not 0 < keep_prob <= 1:
        raise ValueError(f"keep probability must be in (0, 1], got {keep_prob}")
    if keep_prob == 1:
        return np.ones(shape, dtype=dtype)
    keep = rng.random(size=shape) < keep_prob
    return keep.astype(dtype) * dtype(1.0 / keep_prob)


def dropout(x: Tensor, keep_prob: float, rng: np.random.Generator | None) -> Tensor:
    if not 0 < keep_prob <= 1:
        raise ValueError(f"keep probability must be in (0, 1], got {keep_prob}")
    if keep_prob == 1 or rng is None:
        return x
    m = dropout_mask(x.shape, keep_prob, rng, x.dtype.type)
    return Tensor._make(x.data * m, (x,), lambda g: (g * m,), "dropout")


def residual_add(skip: Tensor, branch: Tensor) -> Tensor:
    """``skip + branch``; a narrower skip is zero-padded in channels."""
    cs, cb = skip.shape[0], branch.shape[0]
    if skip.shape[1:] != branch.shape[1:] or cs > cb:
        raise ShapeError(f"residual merge of {skip.shape} into {branch.shape}")
    if cs == cb:
        return Tensor._make(skip.data + branch.data, (skip, branch), lambda g: (g, g), "residual_add")
    out = branch.data.copy()
    out[:cs] += skip.data
    return Tensor._make(out, (skip, branch), lambda g: (g[:cs], g), "residual_add")
