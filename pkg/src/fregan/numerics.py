"""Dense tensors, differentiable layer primitives and a small reverse-mode engine.

Every op takes :class:`Tensor` inputs and returns a new :class:`Tensor`.  When any
input requires a gradient, the output remembers its parents together with a
vector-Jacobian product closure; :func:`backward` replays those closures in
reverse topological order.  Image tensors are laid out (N, C, H, W).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    pass


class DegenerateStatisticsError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class ContractError(ValueError):
    pass


class Tensor:
    """A numpy array plus the bookkeeping needed to differentiate through it."""

    __slots__ = ("data", "requires_grad", "_parents", "_vjp", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _vjp=None, op=""):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self._parents = _parents
        self._vjp = _vjp
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op!r})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)


def _as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float32))


def _check_finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by {op}")


def make_op(data, parents: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    """Wrap ``data`` as the output of ``op``; record the graph only when needed."""
    _check_finite(data, op)
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), vjp, op)
    return Tensor(data, op=op)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic and reductions


def add(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    out = a.data + b.data
    return make_op(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    out = a.data - b.data
    return make_op(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    out = a.data * b.data
    return make_op(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def log(x):
    if np.any(x.data <= 0):
        raise NumericError("log of a non-positive value")
    return make_op(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sum(x):  # noqa: A001 - mirrors numpy naming
    return make_op(x.data.sum(), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


def mean(x):
    n = x.data.size
    return make_op(
        x.data.mean(), (x,), lambda g: (np.full(x.shape, g / n, dtype=x.dtype),), "mean"
    )


# ---------------------------------------------------------------------------
# activations


def relu(x):
    mask = x.data > 0
    return make_op(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x, slope=0.2):
    mask = x.data >= 0
    out = np.where(mask, x.data, slope * x.data).astype(x.dtype)
    scale = np.where(mask, 1.0, slope).astype(x.dtype)
    return make_op(out, (x,), lambda g: (g * scale,), "leaky_relu")


def tanh(x):
    bound = 1 - np.finfo(x.dtype).epsneg
    out = np.clip(np.tanh(x.data), -bound, bound).astype(x.dtype)
    return make_op(out, (x,), lambda g: (g * (1 - out * out),), "tanh")


def sigmoid(x):
    # clipped so the output stays strictly inside (0, 1) even where float32 saturates
    info = np.finfo(x.dtype)
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1 / (1 + z), z / (1 + z))
    out = np.clip(out, info.tiny, 1 - info.epsneg).astype(x.dtype)
    return make_op(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


def activation(x, kind, slope=0.2):
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    if kind == "relu":
        return relu(x)
    if kind == "tanh":
        return tanh(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def dropout(x, rate, rng):
    if rate <= 0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / np.asarray(1 - rate, dtype=x.dtype)
    return make_op(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------------------
# structural ops


def concat_channels(a, b):
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise DimensionError("concat_channels expects rank-4 tensors")
    for axis, label in ((0, "batch"), (2, "height"), (3, "width")):
        if a.shape[axis] != b.shape[axis]:
            raise DimensionError(
                f"{label} axis mismatch in concat_channels: {a.shape[axis]} vs {b.shape[axis]}"
            )
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return make_op(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]), "concat_channels")


# ---------------------------------------------------------------------------
# convolution


@dataclass
class ConvParams:
    """Weights for a convolution.

    For ``conv2d`` the weight layout is (out_channels, in_channels, kh, kw).  For
    ``conv2d_transpose`` it is (in_channels, out_channels, kh, kw), so the same
    array can serve as a convolution and its adjoint.
    """

    weight: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weight.data.ndim != 4 or min(self.weight.shape[2:]) < 1:
            raise DimensionError(f"kernel must be rank 4 with positive extents, got {self.weight.shape}")
        if self.stride < 1:
            raise DimensionError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise DimensionError(f"padding must be >= 0, got {self.padding}")


def _im2col(xp, kh, kw, stride, out_h, out_w):
    """(N, C, Hp, Wp) -> strided view (N, C, out_h, out_w, kh, kw)."""
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, : (out_h - 1) * stride + 1 : stride, : (out_w - 1) * stride + 1 : stride]


def _col2im(cols, hp, wp, stride):
    """Scatter-add (N, C, oh, ow, kh, kw) patches into a (N, C, hp, wp) buffer."""
    n, c, oh, ow, kh, kw = cols.shape
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + (oh - 1) * stride + 1 : stride, j : j + (ow - 1) * stride + 1 : stride] += cols[
                :, :, :, :, i, j
            ]
    return out


def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _crop(x, p):
    if p == 0:
        return x
    return x[:, :, p:-p, p:-p]


def conv2d(x, params: ConvParams):
    """Cross-correlation of ``x`` with ``params.weight`` (no kernel flip)."""
    w, b, s, p = params.weight, params.bias, params.stride, params.padding
    if x.data.ndim != 4:
        raise DimensionError(f"conv2d expects (N, C, H, W), got shape {x.shape}")
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if c != ci:
        raise DimensionError(f"channel axis mismatch: input has {c}, weights expect {ci}")
    if h + 2 * p < kh:
        raise DimensionError(f"height axis too small: {h} + 2*{p} < kernel {kh}")
    if wd + 2 * p < kw:
        raise DimensionError(f"width axis too small: {wd} + 2*{p} < kernel {kw}")
    oh = (h + 2 * p - kh) // s + 1
    ow = (wd + 2 * p - kw) // s + 1
    xp = _pad(x.data, p)
    cols = _im2col(xp, kh, kw, s, oh, ow)
    out = np.tensordot(cols, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = out + b.data.reshape(1, -1, 1, 1)

    def vjp(g):
        gx = gw = gb = None
        if x.requires_grad:
            gcols = np.tensordot(g, w.data, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
            gx = _crop(_col2im(gcols, h + 2 * p, wd + 2 * p, s), p)
        if w.requires_grad:
            gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        if b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    return make_op(np.ascontiguousarray(out), (x, w, b), vjp, "conv2d")


def conv2d_transpose(x, params: ConvParams):
    """Transposed convolution; the forward pass is the input-gradient of conv2d."""
    w, b, s, p = params.weight, params.bias, params.stride, params.padding
    if x.data.ndim != 4:
        raise DimensionError(f"conv2d_transpose expects (N, C, H, W), got shape {x.shape}")
    n, c, h, wd = x.shape
    ci, o, kh, kw = w.shape
    if c != ci:
        raise DimensionError(f"channel axis mismatch: input has {c}, weights expect {ci}")
    oh = (h - 1) * s - 2 * p + kh
    ow = (wd - 1) * s - 2 * p + kw
    if oh < 1 or ow < 1:
        raise DimensionError(f"transposed convolution gives non-positive extent ({oh}, {ow})")
    cols = np.tensordot(x.data, w.data, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
    out = _crop(_col2im(cols, oh + 2 * p, ow + 2 * p, s), p) + b.data.reshape(1, -1, 1, 1)

    def vjp(g):
        gx = gw = gb = None
        if x.requires_grad or w.requires_grad:
            gcols = _im2col(_pad(g, p), kh, kw, s, h, wd)
            if x.requires_grad:
                gx = np.tensordot(gcols, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
            if w.requires_grad:
                gw = np.tensordot(x.data, gcols, axes=([0, 2, 3], [0, 2, 3]))
        if b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    return make_op(np.ascontiguousarray(out), (x, w, b), vjp, "conv2d_transpose")


# ---------------------------------------------------------------------------
# batch normalization


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.99
    epsilon: float = 1e-5

    def __post_init__(self):
        if not 0 < self.momentum < 1:
            raise ValueError(f"momentum must lie in (0, 1), got {self.momentum}")
        # epsilon = 0 is tolerated for exact hand-checked normalizations
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be non-negative, got {self.epsilon}")
        if np.any(self.running_var < 0):
            raise ValueError("running_var must be non-negative")


def batchnorm(x, params: BatchNormParams, training: bool, update_stats: bool = True):
    """Per-channel normalization over (N, H, W).

    In training mode the batch statistics are used and, unless ``update_stats`` is
    false, the running statistics are blended in place with weight ``momentum`` on
    the old value.
    """
    if x.data.ndim != 4:
        raise DimensionError(f"batchnorm expects (N, C, H, W), got shape {x.shape}")
    c = x.shape[1]
    if params.gamma.shape != (c,):
        raise DimensionError(f"channel axis mismatch: input has {c}, parameters have {params.gamma.shape[0]}")
    gamma = params.gamma.data.reshape(1, c, 1, 1)
    beta = params.beta.data.reshape(1, c, 1, 1)
    eps = params.epsilon
    if not training:
        inv_std = 1 / np.sqrt(params.running_var + eps).reshape(1, c, 1, 1)
        xhat = (x.data - params.running_mean.reshape(1, c, 1, 1)) * inv_std
        xhat = xhat.astype(x.dtype)

        def vjp_eval(g):
            return (
                g * gamma * inv_std.astype(x.dtype),
                (g * xhat).sum(axis=(0, 2, 3)),
                g.sum(axis=(0, 2, 3)),
            )

        return make_op(xhat * gamma + beta, (x, params.gamma, params.beta), vjp_eval, "batchnorm")

    m = x.shape[0] * x.shape[2] * x.shape[3]
    if m < 2:
        raise DegenerateStatisticsError(
            f"batchnorm in training mode needs at least 2 values per channel, got {m}"
        )
    mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
    inv_std = 1 / np.sqrt(var + eps)
    xhat = centered * inv_std
    if update_stats:
        mom = params.momentum
        unbiased = var.reshape(c) * (m / (m - 1))
        params.running_mean[...] = mom * params.running_mean + (1 - mom) * mu.reshape(c)
        params.running_var[...] = mom * params.running_var + (1 - mom) * unbiased

    def vjp(g):
        gxhat = g * gamma
        gx = (
            inv_std
            / m
            * (
                m * gxhat
                - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        )
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return make_op(xhat * gamma + beta, (x, params.gamma, params.beta), vjp, "batchnorm")


# ---------------------------------------------------------------------------
# reverse pass


def _topological(root):
    order, seen = [], set()
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(output: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradient of a scalar ``output`` with respect to each named tensor.

    Tensors that do not feed ``output`` get a zero gradient of their own shape.
    """
    if output.data.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
    grads = {id(output): np.ones_like(output.data)}
    if output.requires_grad:
        for node in reversed(_topological(output)):
            g = grads.pop(id(node), None) if node._parents else grads.get(id(node))
            if g is None or node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=parent.dtype).reshape(parent.shape)
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg
    result = {}
    for name, tensor in params.items():
        g = grads.get(id(tensor))
        result[name] = np.zeros_like(tensor.data) if g is None else g
    return result


def finite_diff_check(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], epsilon: float = 1e-6) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    ``fn`` receives one :class:`Tensor` per input array and must return a scalar.
    The error per coordinate is |analytic - numeric| / max(1, |analytic|).
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    if any(a.dtype != np.float64 for a in arrays):
        raise ContractError("finite_diff_check runs in 64-bit mode only")
    if not 1e-6 <= epsilon <= 1e-4:
        raise ContractError(f"epsilon must lie in [1e-6, 1e-4], got {epsilon}")
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*tensors)
    if not np.all(np.isfinite(out.data)):
        raise NumericError("function under test returned non-finite output")
    analytic = backward(out, {str(i): t for i, t in enumerate(tensors)})

    def evaluate():
        value = fn(*[Tensor(a) for a in arrays]).data
        if not np.all(np.isfinite(value)):
            raise NumericError("non-finite value during finite differencing")
        return float(value)

    worst = 0.0
    for i, arr in enumerate(arrays):
        flat = arr.reshape(-1)
        ga = analytic[str(i)].reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            hi, lo = orig + epsilon, orig - epsilon
            flat[k] = hi
            f_plus = evaluate()
            flat[k] = lo
            f_minus = evaluate()
            flat[k] = orig
            # divide by the step actually taken, not the nominal 2*epsilon
            numeric = (f_plus - f_minus) / (hi - lo)
            worst = max(worst, abs(ga[k] - numeric) / max(1.0, abs(ga[k])))
    return worst
