"""Minimal reverse-mode differentiation over numpy float64 arrays.

Only the operations needed by the toy codecs, the attack losses and the
differentiable metrics are provided. Each op computes its forward value
eagerly and, when any input requires a gradient, records a closure that
maps the output cotangent to the input cotangents.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import sparse, special


class ShapeError(ValueError):
    """Raised when an op receives inputs of incompatible shapes."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible shapes {', '.join(str(s) for s in self.shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return getitem(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every reachable leaf that requires a gradient.

    Leaf gradients are overwritten, not accumulated, so repeated calls on
    fresh graphs need no zeroing.
    """
    if loss.data.size != 1:
        raise ShapeError("backward", loss.shape, detail="loss must be a scalar")
    if not loss.requires_grad:
        return
    order = _toposort(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            node.grad = g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def grad(loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` with respect to ``wrt`` (zeros when unreachable)."""
    for t in wrt:
        t.grad = None
    backward(loss)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in wrt]


# ---------------------------------------------------------------- elementwise


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("div", a, b)
    out = a.data / b.data
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)),
                 "div")


def _unary(x, value: np.ndarray, dfdx: Callable[[], np.ndarray], op: str) -> Tensor:
    x = as_tensor(x)
    return _node(value, (x,), lambda g: (g * dfdx(),), op)


def power(x, p: float) -> Tensor:
    x = as_tensor(x)
    return _unary(x, x.data ** p, lambda: p * x.data ** (p - 1), "pow")


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _unary(x, out, lambda: 0.5 / out, "sqrt")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _unary(x, out, lambda: out, "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    return _unary(x, np.log(x.data), lambda: 1.0 / x.data, "log")


def abs_(x) -> Tensor:
    x = as_tensor(x)
    return _unary(x, np.abs(x.data), lambda: np.sign(x.data), "abs")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _unary(x, out, lambda: 1.0 - out * out, "tanh")


def softplus(x) -> Tensor:
    x = as_tensor(x)
    return _unary(x, np.logaddexp(0.0, x.data), lambda: special.expit(x.data), "softplus")


def leaky_relu(x, slope: float = 0.01) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    return _unary(x, np.where(pos, x.data, slope * x.data), lambda: np.where(pos, 1.0, slope),
                  "leaky_relu")


def clamp(x, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip to ``[lo, hi]``; gradient is 1 strictly inside, 0 elsewhere."""
    x = as_tensor(x)
    lo_ = -np.inf if lo is None else lo
    hi_ = np.inf if hi is None else hi
    inside = (x.data > lo_) & (x.data < hi_)
    return _unary(x, np.clip(x.data, lo_, hi_), lambda: inside.astype(np.float64), "clamp")


def round_ste(x) -> Tensor:
    """Round in the forward pass, identity in the backward pass."""
    x = as_tensor(x)
    return _node(np.round(x.data), (x,), lambda g: (g,), "round_ste")


def uniform_noise(x, rng: np.random.Generator, shared_batch: bool = False) -> Tensor:
    """Add U(-0.5, 0.5) noise drawn from ``rng``; gradient is identity.

    With ``shared_batch`` one draw is reused for every entry along axis 0.
    """
    x = as_tensor(x)
    size = (1,) + x.shape[1:] if shared_batch else x.shape
    noise = rng.uniform(-0.5, 0.5, size=size)
    return _node(x.data + noise, (x,), lambda g: (g,), "uniform_noise")


def normal_cdf(x) -> Tensor:
    x = as_tensor(x)
    return _unary(x, special.ndtr(x.data),
                  lambda: np.exp(-0.5 * x.data ** 2) / np.sqrt(2 * np.pi), "normal_cdf")


def elementwise(x, f: Callable, df: Callable, op: str) -> Tensor:
    """Apply a scalar function with a known derivative elementwise."""
    x = as_tensor(x)
    return _unary(x, f(x.data), lambda: df(x.data), op)


# ----------------------------------------------------------------- reductions


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(out, (x,), vjp, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum_(x, axes, keepdims), 1.0 / n)


def l2norm(x, axis=None) -> Tensor:
    """Euclidean norm over ``axis``; the subgradient at zero is zero."""
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    out = np.sqrt((x.data ** 2).sum(axis=axes))

    def vjp(g):
        n = np.expand_dims(out, axes)
        safe = np.where(n > 0, n, 1.0)
        return (np.where(n > 0, x.data / safe, 0.0) * np.expand_dims(g, axes),)

    return _node(out, (x,), vjp, "l2norm")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, shape) from None
    return _node(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def getitem(x, key) -> Tensor:
    x = as_tensor(x)
    out = x.data[key]

    def vjp(g):
        full = np.zeros_like(x.data)
        np.add.at(full, key, g)
        return (full,)

    return _node(np.array(out), (x,), vjp, "getitem")


def concat(xs: Sequence, axis: int = 1) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    try:
        out = np.concatenate([t.data for t in xs], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in xs)) from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in xs])

    def vjp(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(xs)))

    return _node(out, xs, vjp, "concat")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    out = a.data @ b.data

    def vjp(g):
        if b.ndim == 1:
            return np.outer(g, b.data), a.data.T @ g
        return g @ b.data.T, a.data.T @ g

    return _node(out, (a, b), vjp, "matmul")


# -------------------------------------------------------------- convolutions


def _check4d(op, *ts):
    for t in ts:
        if t.ndim != 4:
            raise ShapeError(op, *(u.shape for u in ts), detail="expected 4-D NCHW")


def _pad_hw(x: np.ndarray, p: int) -> np.ndarray:
    return x if p == 0 else np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _conv_fwd(x: np.ndarray, w: np.ndarray, s: int, p: int) -> np.ndarray:
    k = w.shape[-1]
    cols = sliding_window_view(_pad_hw(x, p), (k, k), axis=(2, 3))[:, :, ::s, ::s]
    return np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)


def _conv_dx(g: np.ndarray, w: np.ndarray, x_shape, s: int, p: int) -> np.ndarray:
    n, c, h, wd = x_shape
    k = w.shape[-1]
    ho, wo = g.shape[2], g.shape[3]
    dcols = np.tensordot(g, w, axes=([1], [0]))  # N Ho Wo C k k
    dxp = np.zeros((n, c, h + 2 * p, wd + 2 * p))
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dxp[:, :, p:p + h, p:p + wd]


def _conv_dw(g: np.ndarray, x: np.ndarray, k: int, s: int, p: int) -> np.ndarray:
    cols = sliding_window_view(_pad_hw(x, p), (k, k), axis=(2, 3))[:, :, ::s, ::s]
    ho, wo = g.shape[2], g.shape[3]
    return np.tensordot(g, cols[:, :, :ho, :wo], axes=([0, 2, 3], [0, 2, 3]))


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input, OCkk weights, zero padding."""
    x, w = as_tensor(x), as_tensor(w)
    _check4d("conv2d", x, w)
    if x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeError("conv2d", x.shape, w.shape)
    k = w.shape[-1]
    if x.shape[2] + 2 * padding < k or x.shape[3] + 2 * padding < k:
        raise ShapeError("conv2d", x.shape, w.shape, detail="input smaller than kernel")
    out = _conv_fwd(x.data, w.data, stride, padding)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data[None, :, None, None]
        parents.append(b)

    def vjp(g):
        grads = [_conv_dx(g, w.data, x.shape, stride, padding) if x.requires_grad else None,
                 _conv_dw(g, x.data, k, stride, padding) if w.requires_grad else None]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _node(out, parents, vjp, "conv2d")


def conv_transpose2d(x, w, b=None, stride: int = 1, padding: int = 0,
                     output_padding: int = 0) -> Tensor:
    """Transposed convolution; ``w`` has shape (C_in, C_out, k, k)."""
    x, w = as_tensor(x), as_tensor(w)
    _check4d("conv_transpose2d", x, w)
    if x.shape[1] != w.shape[0] or w.shape[2] != w.shape[3]:
        raise ShapeError("conv_transpose2d", x.shape, w.shape)
    k = w.shape[-1]
    n, _, h, wd = x.shape
    ho = (h - 1) * stride - 2 * padding + k + output_padding
    wo = (wd - 1) * stride - 2 * padding + k + output_padding
    out_shape = (n, w.shape[1], ho, wo)
    out = _conv_dx(x.data, w.data, out_shape, stride, padding)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data[None, :, None, None]
        parents.append(b)

    def vjp(g):
        grads = [_conv_fwd(g, w.data, stride, padding)[:, :, :h, :wd] if x.requires_grad else None,
                 _conv_dw(x.data, g, k, stride, padding) if w.requires_grad else None]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _node(out, parents, vjp, "conv_transpose2d")


def _gauss1d(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(r ** 2) / (2 * sigma ** 2))
    return k / k.sum()


def _corr_valid(x: np.ndarray, k: np.ndarray, axis: int) -> np.ndarray:
    win = sliding_window_view(x, k.size, axis=axis)
    return win @ k


def _corr_valid_adj(g: np.ndarray, k: np.ndarray, axis: int, n: int) -> np.ndarray:
    shape = list(g.shape)
    shape[axis] = n
    out = np.zeros(shape)
    m = g.shape[axis]
    for i, ki in enumerate(k):
        sl = [slice(None)] * g.ndim
        sl[axis] = slice(i, i + m)
        out[tuple(sl)] += ki * g
    return out


def gaussian_blur(x, size: int = 11, sigma: float = 1.5) -> Tensor:
    """Separable normalized Gaussian filter, 'valid' borders, per channel."""
    x = as_tensor(x)
    if x.ndim < 2 or x.shape[-1] < size or x.shape[-2] < size:
        raise ShapeError("gaussian_blur", x.shape, (size, size), detail="image smaller than window")
    k = _gauss1d(size, sigma)
    h, w = x.shape[-2], x.shape[-1]
    out = _corr_valid(_corr_valid(x.data, k, -2), k, -1)

    def vjp(g):
        gh = _corr_valid_adj(g, k, g.ndim - 1, w)
        return (_corr_valid_adj(gh, k, g.ndim - 2, h),)

    return _node(out, (x,), vjp, "gaussian_blur")


# ------------------------------------------------------------ resampling ops


def downsample2x(x) -> Tensor:
    """2x2 average pooling; a trailing odd row/column is dropped."""
    x = as_tensor(x)
    h, w = x.shape[-2] // 2, x.shape[-1] // 2
    if h == 0 or w == 0:
        raise ShapeError("downsample2x", x.shape)
    v = x.data[..., :2 * h, :2 * w]
    out = 0.25 * (v[..., 0::2, 0::2] + v[..., 0::2, 1::2] + v[..., 1::2, 0::2] + v[..., 1::2, 1::2])

    def vjp(g):
        full = np.zeros_like(x.data)
        q = 0.25 * g
        for di in (0, 1):
            for dj in (0, 1):
                full[..., di:2 * h:2, dj:2 * w:2] = q
        return (full,)

    return _node(out, (x,), vjp, "downsample2x")


def upsample2x(x) -> Tensor:
    """Nearest-neighbour 2x upsampling."""
    x = as_tensor(x)
    out = x.data.repeat(2, axis=-2).repeat(2, axis=-1)

    def vjp(g):
        return (g[..., 0::2, 0::2] + g[..., 0::2, 1::2] + g[..., 1::2, 0::2] + g[..., 1::2, 1::2],)

    return _node(out, (x,), vjp, "upsample2x")


def channel_select(x, idx: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=int)
    if x.ndim < 3 or np.any(idx >= x.shape[-3]) or np.any(idx < -x.shape[-3]):
        raise ShapeError("channel_select", x.shape, idx.shape, detail=f"indices {idx.tolist()}")
    out = np.take(x.data, idx, axis=-3)

    def vjp(g):
        full = np.zeros_like(x.data)
        for k, c in enumerate(idx):
            full[..., c, :, :] += g[..., k, :, :]
        return (full,)

    return _node(out, (x,), vjp, "channel_select")


def channel_mix(x, matrix, offset=None) -> Tensor:
    """Per-pixel linear map over the channel axis: y_i = sum_j M_ij x_j + o_i."""
    x = as_tensor(x)
    m = np.asarray(matrix, dtype=np.float64)
    if x.ndim < 3 or m.shape[1] != x.shape[-3]:
        raise ShapeError("channel_mix", x.shape, m.shape)
    out = np.einsum("ij,...jhw->...ihw", m, x.data)
    if offset is not None:
        out = out + np.asarray(offset, dtype=np.float64)[:, None, None]
    return _node(out, (x,), lambda g: (np.einsum("ij,...ihw->...jhw", m, g),), "channel_mix")


def haar2d(x) -> Tensor:
    """Orthonormal one-level 2-D Haar split.

    Output stacks the bands on the channel axis as [LL, LH, HL, HH],
    each with the input's channel count and half its spatial size.
    """
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError("haar2d", x.shape, detail="needs NCHW with even H and W")
    out = _haar_fwd(x.data)
    return _node(out, (x,), lambda g: (_haar_inv(g),), "haar2d")


def ihaar2d(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[1] % 4:
        raise ShapeError("ihaar2d", x.shape, detail="channel count must be a multiple of 4")
    return _node(_haar_inv(x.data), (x,), lambda g: (_haar_fwd(g),), "ihaar2d")


def _haar_fwd(x: np.ndarray) -> np.ndarray:
    a, b = x[:, :, 0::2, 0::2], x[:, :, 0::2, 1::2]
    c, d = x[:, :, 1::2, 0::2], x[:, :, 1::2, 1::2]
    return 0.5 * np.concatenate([a + b + c + d, a - b + c - d, a + b - c - d, a - b - c + d], axis=1)


def _haar_inv(y: np.ndarray) -> np.ndarray:
    n, c4, h, w = y.shape
    c = c4 // 4
    ll, lh, hl, hh = y[:, :c], y[:, c:2 * c], y[:, 2 * c:3 * c], y[:, 3 * c:]
    out = np.empty((n, c, 2 * h, 2 * w))
    out[:, :, 0::2, 0::2] = 0.5 * (ll + lh + hl + hh)
    out[:, :, 0::2, 1::2] = 0.5 * (ll - lh + hl - hh)
    out[:, :, 1::2, 0::2] = 0.5 * (ll + lh - hl - hh)
    out[:, :, 1::2, 1::2] = 0.5 * (ll - lh - hl + hh)
    return out


def resample(x, matrix: sparse.csr_matrix, out_hw: tuple[int, int]) -> Tensor:
    """Linear spatial resampling ``y_flat = S @ x_flat`` per channel.

    ``matrix`` has shape (H_out*W_out, H*W). Flips, rolls, crops, padding
    and bilinear warps are all expressed through it.
    """
    x = as_tensor(x)
    lead = x.shape[:-2]
    hw = x.shape[-2] * x.shape[-1]
    if matrix.shape[1] != hw or matrix.shape[0] != out_hw[0] * out_hw[1]:
        raise ShapeError("resample", x.shape, matrix.shape)
    flat = x.data.reshape(-1, hw)
    out = (matrix @ flat.T).T.reshape(*lead, *out_hw)

    def vjp(g):
        gf = g.reshape(-1, out_hw[0] * out_hw[1])
        return ((matrix.T @ gf.T).T.reshape(x.shape),)

    return _node(out, (x,), vjp, "resample")


# --------------------------------------------------------- entropy model ops


def pwl_cdf(v, logits, lo: float, hi: float) -> Tensor:
    """Monotone piecewise-linear CDF evaluated per channel.

    ``v`` has shape (N, C, ...); ``logits`` has shape (C, K-1). The knot
    increments are softmax(logits), placed on K equally spaced knots over
    [lo, hi], so CDF(lo) = 0 and CDF(hi) = 1 by construction.
    """
    v, logits = as_tensor(v), as_tensor(logits)
    if v.ndim < 2 or logits.ndim != 2 or v.shape[1] != logits.shape[0]:
        raise ShapeError("pwl_cdf", v.shape, logits.shape)
    c, m = logits.shape
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    inc = np.exp(z)
    inc /= inc.sum(axis=1, keepdims=True)
    knots = np.concatenate([np.zeros((c, 1)), np.cumsum(inc, axis=1)], axis=1)
    knots[:, -1] = 1.0
    step = (hi - lo) / m
    pos = (np.clip(v.data, lo, hi) - lo) / step
    seg = np.minimum(np.floor(pos).astype(np.int64), m)
    frac = pos - seg
    ch = np.arange(c).reshape((1, c) + (1,) * (v.ndim - 2))
    ch = np.broadcast_to(ch, v.shape)
    seg_inc = np.where(seg < m, inc[ch, np.minimum(seg, m - 1)], 0.0)
    out = knots[ch, seg] + frac * seg_inc
    inside = (v.data > lo) & (v.data < hi)

    def vjp(g):
        gv = g * np.where(inside, seg_inc / step, 0.0)
        flat = (ch * (m + 1) + seg).ravel()
        below = np.bincount(flat, weights=g.ravel(), minlength=c * (m + 1)).reshape(c, m + 1)
        # dCDF/dinc_j = 1 for j < seg, frac for j == seg
        d_inc = np.cumsum(below[:, ::-1], axis=1)[:, ::-1][:, 1:]
        at = np.bincount(flat, weights=(g * frac).ravel(), minlength=c * (m + 1)).reshape(c, m + 1)
        d_inc = d_inc + at[:, :m]
        g_logits = inc * (d_inc - (d_inc * inc).sum(axis=1, keepdims=True))
        return gv, g_logits

    return _node(out, (v, logits), vjp, "pwl_cdf")


OPS: dict[str, Callable] = {
    "add": add, "sub": sub, "mul": mul, "div": div, "pow": power, "sqrt": sqrt,
    "exp": exp, "log": log, "abs": abs_, "tanh": tanh, "softplus": softplus,
    "leaky_relu": leaky_relu, "clamp": clamp, "round_ste": round_ste,
    "uniform_noise": uniform_noise, "normal_cdf": normal_cdf, "sum": sum_, "mean": mean,
    "l2norm": l2norm, "reshape": reshape, "getitem": getitem, "concat": concat,
    "matmul": matmul, "conv2d": conv2d, "conv_transpose2d": conv_transpose2d,
    "gaussian_blur": gaussian_blur, "downsample2x": downsample2x, "upsample2x": upsample2x,
    "channel_select": channel_select, "channel_mix": channel_mix, "haar2d": haar2d,
    "ihaar2d": ihaar2d, "resample": resample, "pwl_cdf": pwl_cdf,
}


def forward_op(op: str, *inputs, **kwargs) -> Tensor:
    """Dispatch an op by name."""
    try:
        fn = OPS[op]
    except KeyError:
        raise ValueError(f"unknown op {op!r}") from None
    return fn(*inputs, **kwargs)


def reflect_indices(n: int, before: int, after: int) -> np.ndarray:
    """Indices for mirror padding without edge repeat; any pad width works."""
    i = np.arange(-before, n + after)
    if n == 1:
        return np.zeros_like(i)
    period = 2 * n - 2
    j = np.mod(i, period)
    return np.where(j >= n, period - j, j)


def pad_reflect(x, top: int, bottom: int, left: int, right: int) -> Tensor:
    x = as_tensor(x)
    ih = reflect_indices(x.shape[-2], top, bottom)
    iw = reflect_indices(x.shape[-1], left, right)
    return getitem(x, (Ellipsis, ih[:, None], iw[None, :]))


OPS["pad_reflect"] = pad_reflect
