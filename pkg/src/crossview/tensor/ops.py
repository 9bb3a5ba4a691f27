"""Differentiable primitives.

Spatial tensors are channels-last: ``H x W x C`` or batched ``B x H x W x C``.
Every op works on either layout; conv kernels are ``kh x kw x Cin x Cout``.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import ShapeError, Tensor, as_tensor, flag_degenerate, make_node

PAD_MODES = ("zero", "circular_horizontal")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _coerce(x, like: Tensor) -> Tensor:
    return x if isinstance(x, Tensor) else as_tensor(x, like.dtype)


# --------------------------------------------------------------------------
# elementwise / structural
# --------------------------------------------------------------------------


def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = as_tensor(a)
    b = _coerce(b, a)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_node(out, (a, b), "add", backward)


def mul(a, b) -> Tensor:
    """Elementwise product; ``b`` may be a python scalar."""
    if np.isscalar(b):
        c = b

        def backward_s(g):
            return (g * c,)

        return make_node(a.data * np.asarray(c, a.dtype), (a,), "scale", backward_s)
    b = _coerce(b, a)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_node(out, (a, b), "mul", backward)


def weighted_sum(terms, weights) -> Tensor:
    """sum_i weights[i] * terms[i] for same-shaped tensors and scalar weights."""
    terms = list(terms)
    weights = [float(w) for w in weights]
    if len(terms) != len(weights):
        raise ShapeError("weighted_sum: terms and weights differ in length")
    shape = terms[0].shape
    for t in terms:
        if t.shape != shape:
            raise ShapeError(f"weighted_sum: shape {t.shape} != {shape}")
    out = sum(w * t.data for w, t in zip(weights, terms))
    out = np.asarray(out, dtype=terms[0].dtype)

    def backward(g):
        return tuple(g * np.asarray(w, g.dtype) for w in weights)

    return make_node(out, terms, "weighted_sum", backward)


def sum_all(x: Tensor) -> Tensor:
    """Sum of every element, as a scalar tensor."""
    out = np.asarray(x.data.sum(), dtype=x.dtype)

    def backward(g):
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return make_node(out, (x,), "sum", backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype)

    def backward(g):
        return (g * mask,)

    return make_node(out, (x,), "relu", backward)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return make_node(out, (x,), "reshape", backward)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))

    def backward(g):
        return (g.transpose(inv),)

    return make_node(out, (x,), "transpose", backward)


def concat(tensors, axis: int = -1) -> Tensor:
    """Concatenate along ``axis`` (channels by default)."""
    tensors = list(tensors)
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=ax))

    return make_node(out, tensors, "concat", backward)


def gather_last(x: Tensor, index: np.ndarray) -> Tensor:
    """out[..., *idx_shape] = x[..., index]; integer index into the last axis."""
    index = np.asarray(index, dtype=np.intp)
    out = x.data[..., index]
    n = x.shape[-1]

    rows = index.reshape(-1, index.shape[-1]) if index.ndim else index.reshape(1, 1)
    unique_rows = all(len(np.unique(r)) == len(r) for r in rows)

    def backward(g):
        lead = x.shape[:-1]
        gx = np.zeros(lead + (n,), dtype=g.dtype)
        g2 = g.reshape(lead + rows.shape)
        if unique_rows:
            for r in range(rows.shape[0]):
                gx[..., rows[r]] += g2[..., r, :]
        else:
            np.add.at(np.moveaxis(gx, -1, 0), rows.reshape(-1), np.moveaxis(g2.reshape(lead + (-1,)), -1, 0))
        return (gx,)

    return make_node(out, (x,), "gather", backward)


def roll_vector(x: Tensor, shift: int) -> Tensor:
    """Cyclic shift toward the front of the last axis: out[i] = x[(i + shift) % n]."""
    n = x.shape[-1]
    return gather_last(x, (np.arange(n) + shift) % n)


# --------------------------------------------------------------------------
# normalisation / reductions
# --------------------------------------------------------------------------


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """Unit norm along ``axis``; all-zero vectors stay zero and are counted."""
    norm = np.sqrt((x.data.astype(np.float64) ** 2).sum(axis=axis, keepdims=True)).astype(x.dtype)
    zero = norm == 0
    if zero.any():
        flag_degenerate(int(zero.sum()))
    safe = np.where(zero, 1, norm)
    y = np.where(zero, 0, x.data / safe).astype(x.dtype)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (np.where(zero, 0, (g - y * dot) / safe).astype(g.dtype),)

    return make_node(y, (x,), "l2_normalize", backward)


def cosine_similarity(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """Cosine similarity along ``axis`` with numpy broadcasting of a and b.

    A pair where either vector has zero norm scores 0 and is counted as degenerate.
    """
    na = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    nb = np.sqrt((b.data * b.data).sum(axis=axis, keepdims=True))
    dot = (a.data * b.data).sum(axis=axis, keepdims=True)
    denom = na * nb
    zero = denom == 0
    if zero.any():
        flag_degenerate(int(zero.sum()))
    safe = np.where(zero, 1, denom)
    cos = np.where(zero, 0, dot / safe)
    out = np.squeeze(cos, axis=axis).astype(np.result_type(a.dtype, b.dtype))

    def backward(g):
        g = np.expand_dims(g, axis)
        ga_n = np.where(na == 0, 1, na)
        gb_n = np.where(nb == 0, 1, nb)
        # d cos / d a = b/(|a||b|) - cos * a/|a|^2
        ga = g * (b.data / safe - cos * a.data / (ga_n * ga_n))
        gb = g * (a.data / safe - cos * b.data / (gb_n * gb_n))
        ga = np.where(zero, 0, ga)
        gb = np.where(zero, 0, gb)
        return _unbroadcast(ga, a.shape).astype(a.dtype), _unbroadcast(gb, b.shape).astype(b.dtype)

    return make_node(out, (a, b), "cosine_similarity", backward)


def softmax_pixels(x: Tensor) -> Tensor:
    """Softmax over every element of an ``H x W`` map (or each item of ``B x H x W``)."""
    batched = x.ndim == 3
    axes = (1, 2) if batched else (0, 1)
    if x.ndim not in (2, 3):
        raise ShapeError(f"softmax_pixels expects H x W or B x H x W, got {x.shape}")
    z = x.data - x.data.max(axis=axes, keepdims=True)
    e = np.exp(z)
    y = (e / e.sum(axis=axes, keepdims=True)).astype(x.dtype)

    def backward(g):
        s = (g * y).sum(axis=axes, keepdims=True)
        return (y * (g - s),)

    return make_node(y, (x,), "softmax_pixels", backward)


def max_channels(x: Tensor, keep: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
    """Max over the last axis, optionally restricted to channels where ``keep`` is true.

    ``keep`` is either one mask of length C or a ``B x C`` mask per leading-axis item.
    Returns (values with a trailing axis of 1, argmax indices). Ties resolve to the
    lowest channel index; the gradient flows only to that channel.
    """
    data = x.data
    if keep is not None:
        keep = np.asarray(keep, dtype=bool)
        c = x.shape[-1]
        if keep.shape == (x.shape[0], c) and x.ndim > 2:
            keep = keep.reshape((x.shape[0],) + (1,) * (x.ndim - 2) + (c,))
        elif keep.shape != (c,) and keep.shape != (x.shape[0], c):
            raise ShapeError(f"channel mask of shape {keep.shape} for {c} channels")
        if not keep.any(axis=-1).all():
            raise ValueError("channel mask excludes every channel")
        if not keep.all():
            data = np.where(keep, data, -np.inf)
    idx = np.argmax(data, axis=-1)
    vals = np.take_along_axis(x.data, idx[..., None], axis=-1)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx[..., None], g, axis=-1)
        return (gx,)

    return make_node(vals, (x,), "max_channels", backward), idx


# --------------------------------------------------------------------------
# linear layers
# --------------------------------------------------------------------------


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x[..., Cin] @ w[Cin, Cout] (+ b)."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"dense: input features {x.shape[-1]} != weight rows {w.shape[0]}")
    x2 = x.data.reshape(-1, x.shape[-1])
    out = (x2 @ w.data).reshape(x.shape[:-1] + (w.shape[1],))
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape)
        gw = x2.T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return make_node(out, parents, "dense", backward)


def _pad(xb: np.ndarray, p: int, mode: str) -> np.ndarray:
    if p == 0:
        return xb
    if mode == "zero":
        return np.pad(xb, ((0, 0), (p, p), (p, p), (0, 0)))
    if mode == "circular_horizontal":
        xb = np.concatenate([xb[:, :, -p:], xb, xb[:, :, :p]], axis=2)
        return np.pad(xb, ((0, 0), (p, p), (0, 0), (0, 0)))
    raise ValueError(f"unknown pad mode {mode!r}; expected one of {PAD_MODES}")


def _unpad(gp: np.ndarray, p: int, mode: str) -> np.ndarray:
    if p == 0:
        return gp
    g = gp[:, p:-p]
    if mode == "zero":
        return g[:, :, p:-p]
    core = g[:, :, p:-p].copy()
    core[:, :, -p:] += g[:, :, :p]
    core[:, :, :p] += g[:, :, -p:]
    return core


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # B, H', W', C, kh, kw
    win = win[:, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    b, c = xp.shape[0], xp.shape[3]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(b * ho * wo, kh * kw * c)


def _col2im(cols: np.ndarray, shape_p, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    b, _, _, c = shape_p
    gp = np.zeros(shape_p, dtype=cols.dtype)
    cols = cols.reshape(b, ho, wo, kh, kw, c)
    for i in range(kh):
        for j in range(kw):
            gp[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += cols[
                :, :, :, i, j
            ]
    return gp


def _batched(x: Tensor) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], False
    if x.ndim == 4:
        return x.data, True
    raise ShapeError(f"expected H x W x C or B x H x W x C, got {x.shape}")


def conv2d(x: Tensor, k: Tensor, b: Tensor | None = None, pad_mode: str = "zero", stride: int = 1) -> Tensor:
    """'Same' convolution (cross-correlation) with output extent ceil(H/stride).

    ``circular_horizontal`` wraps the width axis and zero-pads the height axis.
    """
    kh, kw, cin, cout = k.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel extents must be odd, got {kh}x{kw}")
    if kh != kw:
        raise ShapeError("conv2d: only square kernels are supported")
    if stride not in (1, 2):
        raise ValueError(f"conv2d: stride must be 1 or 2, got {stride}")
    if pad_mode not in PAD_MODES:
        raise ValueError(f"unknown pad mode {pad_mode!r}")
    xb, batched = _batched(x)
    if xb.shape[3] != cin:
        raise ShapeError(f"conv2d: input has {xb.shape[3]} channels, kernel expects {cin}")
    p = (kh - 1) // 2
    if pad_mode == "circular_horizontal" and p > xb.shape[2]:
        raise ShapeError("conv2d: circular padding wider than the input")
    n, h, w, _ = xb.shape
    ho, wo = -(-h // stride), -(-w // stride)
    xp = _pad(xb, p, pad_mode)
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    kmat = k.data.reshape(kh * kw * cin, cout)
    out = (cols @ kmat).reshape(n, ho, wo, cout)
    if b is not None:
        out = out + b.data
    if not batched:
        out = out[0]
    parents = (x, k) if b is None else (x, k, b)

    def backward(g):
        gb = g if batched else g[None]
        g2 = gb.reshape(-1, cout)
        gk = (cols.T @ g2).reshape(k.shape)
        gcols = g2 @ kmat.T
        gx = _unpad(_col2im(gcols, xp.shape, kh, kw, stride, ho, wo), p, pad_mode)
        if not batched:
            gx = gx[0]
        if b is None:
            return gx, gk
        return gx, gk, g2.sum(axis=0)

    return make_node(out, parents, "conv2d", backward)


def deconv2d(y: Tensor, k: Tensor, b: Tensor | None = None) -> Tensor:
    """Stride-2 transposed convolution: N x N x Cin -> 2N x 2N x Cout.

    ``k`` has shape ``kh x kw x Cout x Cin``: the kernel of the stride-2 zero-padded
    conv2d mapping 2N x 2N x Cout -> N x N x Cin whose adjoint this op is.
    """
    kh, kw, cout, cin = k.shape
    if kh % 2 == 0 or kh != kw:
        raise ShapeError(f"deconv2d: kernel must be square with odd extent, got {kh}x{kw}")
    yb, batched = _batched(y)
    n, hy, wy, c = yb.shape
    if hy != wy:
        raise ShapeError(f"deconv2d: input must be square, got {hy}x{wy}")
    if c != cin:
        raise ShapeError(f"deconv2d: input has {c} channels, kernel expects {cin}")
    p = (kh - 1) // 2
    ho = 2 * hy
    shape_p = (n, ho + 2 * p, ho + 2 * p, cout)
    kmat = k.data.reshape(kh * kw * cout, cin)
    y2 = yb.reshape(-1, cin)
    out = _unpad(_col2im(y2 @ kmat.T, shape_p, kh, kw, 2, hy, wy), p, "zero")
    if b is not None:
        out = out + b.data
    if not batched:
        out = out[0]
    parents = (y, k) if b is None else (y, k, b)

    def backward(g):
        gb = g if batched else g[None]
        gp = _pad(gb, p, "zero")
        cols = _im2col(gp, kh, kw, 2, hy, wy)
        gy = (cols @ kmat).reshape(yb.shape)
        gk = (cols.T @ y2).reshape(k.shape)
        if not batched:
            gy = gy[0]
        if b is None:
            return gy, gk
        return gy, gk, gb.reshape(-1, cout).sum(axis=0)

    return make_node(out, parents, "deconv2d", backward)
