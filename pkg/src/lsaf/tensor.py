"""Dense tensors with reverse-mode automatic differentiation.

Everything the network needs runs through the `Tensor` class below: values are
contiguous numpy arrays, and every differentiable operation records a gradient
closure so that `Tensor.backward()` can sweep the tape in reverse topological
order. Tensors are plain values and safe to pass between threads; the tape
itself is built and consumed on a single thread.

Dense layouts follow the usual deep-learning conventions: convolutions take
`(cin, *spatial)` or batched `(n, cin, *spatial)` inputs with
`(cout, cin, *kernel)` weights, batch norm normalizes axis 1.

Convolution forward passes accumulate one kernel tap at a time, in
channel-major tap order. That keeps the per-element summation order identical
to a naive nested-loop evaluation, so results are reproducible bit-for-bit
and directly comparable against straight-line reference code. Gradients have
no such ordering constraint and use BLAS contractions.

Precision defaults to float64; switch to float32 with `set_default_dtype`
when training throughput matters more than gradient-check headroom.
"""

from __future__ import annotations

import itertools
import os
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, NumericError, ShapeError

__all__ = [
    "Tensor",
    "no_grad",
    "set_default_dtype",
    "default_dtype",
    "set_checked",
    "checked",
    "matmul",
    "concat",
    "relu",
    "sigmoid",
    "softmax",
    "conv2d",
    "conv3d",
    "batch_norm",
    "cross_entropy",
    "backward",
    "finite_diff_check",
]

_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True
_CHECKED = os.environ.get("LSAF_CHECKED", "") not in ("", "0")


def set_default_dtype(dtype) -> None:
    """Set the element type used for new tensors (float32 or float64)."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ConfigError(f"unsupported tensor dtype {dt}; use float32 or float64")
    _DEFAULT_DTYPE = dt.type


def default_dtype():
    return _DEFAULT_DTYPE


def set_checked(on: bool) -> None:
    """Toggle checked mode: every op output is asserted finite."""
    global _CHECKED
    _CHECKED = bool(on)


def checked() -> bool:
    return _CHECKED


class no_grad:
    """Context manager that disables tape recording inside its block."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._saved = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._saved
        return False


def _assert_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by '{op}'")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing trailing-axis broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A dense n-dimensional array with optional gradient tracking.

    `data` is always a numpy array in the library's default precision unless
    an explicit dtype is given. `grad` stays None until `backward()` first
    deposits a gradient; repeated backward passes accumulate into it until it
    is cleared with `zero_grad()`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._grad_fn: Callable | None = None
        self._op = "leaf"
        if _CHECKED:
            _assert_finite(self.data, "tensor")

    # ------------------------------------------------------------------
    # basic introspection

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    # ------------------------------------------------------------------
    # autodiff driver

    def backward(self) -> None:
        """Reverse sweep from a scalar: accumulates `grad` on every reachable
        tensor that requires gradients."""
        if self.data.size != 1:
            raise ContractError(
                f"backward() requires a scalar, got shape {self.shape}"
            )
        order = _toposort(self)
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad = self.grad + np.ones_like(self.data)
        for node in reversed(order):
            if node._grad_fn is None or node.grad is None:
                continue
            parent_grads = node._grad_fn(node.grad)
            for parent, g in zip(node._parents, parent_grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += g

    # ------------------------------------------------------------------
    # arithmetic

    def __add__(self, other):
        other = _wrap(other, self.data.dtype)
        data = _combine(self.data, other.data, np.add, "add")

        def grad_fn(g):
            return _unbroadcast(g, self.data.shape), _unbroadcast(g, other.data.shape)

        return _node(data, (self, other), "add", grad_fn)

    __radd__ = __add__

    def __sub__(self, other):
        other = _wrap(other, self.data.dtype)
        data = _combine(self.data, other.data, np.subtract, "sub")

        def grad_fn(g):
            return _unbroadcast(g, self.data.shape), _unbroadcast(-g, other.data.shape)

        return _node(data, (self, other), "sub", grad_fn)

    def __rsub__(self, other):
        return _wrap(other, self.data.dtype) - self

    def __mul__(self, other):
        other = _wrap(other, self.data.dtype)
        data = _combine(self.data, other.data, np.multiply, "mul")
        a, b = self, other

        def grad_fn(g):
            return (
                _unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape),
            )

        return _node(data, (a, b), "mul", grad_fn)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _wrap(other, self.data.dtype)
        data = _combine(self.data, other.data, np.divide, "div")
        a, b = self, other

        def grad_fn(g):
            ga = _unbroadcast(g / b.data, a.data.shape)
            gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
            return ga, gb

        return _node(data, (a, b), "div", grad_fn)

    def __rtruediv__(self, other):
        return _wrap(other, self.data.dtype) / self

    def __neg__(self):
        def grad_fn(g):
            return (-g,)

        return _node(-self.data, (self,), "neg", grad_fn)

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise ContractError("only constant exponents are supported")
        data = self.data ** p
        x = self

        def grad_fn(g):
            return (g * p * x.data ** (p - 1),)

        return _node(data, (x,), "pow", grad_fn)

    def __matmul__(self, other):
        return matmul(self, other)

    # ------------------------------------------------------------------
    # shape manipulation

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        try:
            data = self.data.reshape(shape)
        except ValueError:
            raise ShapeError(f"cannot reshape {old} into {shape}")

        def grad_fn(g):
            return (g.reshape(old),)

        return _node(data, (self,), "reshape", grad_fn)

    def transpose(self, axes: Sequence[int] | None = None) -> "Tensor":
        if axes is not None:
            axes = tuple(axes)
            if sorted(axes) != list(range(self.ndim)):
                raise ShapeError(
                    f"transpose axes {axes} are not a permutation for ndim {self.ndim}"
                )
            inverse = tuple(np.argsort(axes))
        else:
            inverse = None
        data = self.data.transpose(axes)

        def grad_fn(g):
            return (g.transpose(inverse),)

        return _node(data, (self,), "transpose", grad_fn)

    # ------------------------------------------------------------------
    # reductions and pointwise functions

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        data = self.data.sum(axis=axis, keepdims=keepdims)
        shape = self.data.shape

        def grad_fn(g):
            return (_spread(g, shape, axis, keepdims),)

        return _node(data, (self,), "sum", grad_fn)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        data = self.data.mean(axis=axis, keepdims=keepdims)
        shape = self.data.shape
        count = self.data.size if axis is None else _axis_count(shape, axis)

        def grad_fn(g):
            return (_spread(g, shape, axis, keepdims) / count,)

        return _node(data, (self,), "mean", grad_fn)

    def sqrt(self) -> "Tensor":
        data = np.sqrt(self.data)

        def grad_fn(g):
            return (g * 0.5 / data,)

        return _node(data, (self,), "sqrt", grad_fn)

    def exp(self) -> "Tensor":
        data = np.exp(self.data)

        def grad_fn(g):
            return (g * data,)

        return _node(data, (self,), "exp", grad_fn)

    def log(self) -> "Tensor":
        x = self

        def grad_fn(g):
            return (g / x.data,)

        return _node(np.log(self.data), (x,), "log", grad_fn)


def _wrap(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype), requires_grad=False, dtype=dtype)


def _combine(a: np.ndarray, b: np.ndarray, ufunc, op: str) -> np.ndarray:
    try:
        return ufunc(a, b)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


def _node(data, parents, op, grad_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._grad_fn = None
    if _CHECKED:
        _assert_finite(data, op)
    return out


def _toposort(root: Tensor) -> list:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def _axis_count(shape: tuple, axis) -> int:
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    n = 1
    for ax in axes:
        n *= shape[ax]
    return n


def _spread(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    """Broadcast a reduction gradient back to the input shape."""
    if axis is None:
        return np.broadcast_to(g, shape).copy() if np.ndim(g) == 0 else np.full(shape, g)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape).copy()


# ----------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy-style broadcasting over leading axes."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs 2-D or higher operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def grad_fn(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
        return ga, gb

    return _node(data, (a, b), "matmul", grad_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along `axis`; all other axes must agree exactly."""
    if not tensors:
        raise ContractError("concat of an empty sequence")
    first = tensors[0]
    ax = axis % first.ndim
    for t in tensors[1:]:
        if t.ndim != first.ndim or any(
            i != ax and t.shape[i] != first.shape[i] for i in range(first.ndim)
        ):
            raise ShapeError(
                f"concat axis {axis}: shapes {[tuple(t.shape) for t in tensors]} disagree"
            )
    data = np.concatenate([t.data for t in tensors], axis=ax)
    offsets = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, offsets, axis=ax))

    return _node(data, tuple(tensors), "concat", grad_fn)


# ----------------------------------------------------------------------
# activations


def relu(x: Tensor) -> Tensor:
    data = np.maximum(x.data, 0)
    mask = x.data > 0

    def grad_fn(g):
        return (g * mask,)

    return _node(data, (x,), "relu", grad_fn)


def sigmoid(x: Tensor) -> Tensor:
    # Two-branch form stays overflow-free for large |x|.
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ez = np.exp(d[~pos])
    out[~pos] = ez / (1.0 + ez)

    def grad_fn(g):
        return (g * out * (1.0 - out),)

    return _node(out, (x,), "sigmoid", grad_fn)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax along `axis`, max-shifted for overflow safety."""
    ax = axis if -x.ndim <= axis < x.ndim else None
    if ax is None:
        raise ShapeError(f"softmax axis {axis} is out of range for ndim {x.ndim}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _node(out, (x,), "softmax", grad_fn)


# ----------------------------------------------------------------------
# convolution


def conv2d(x: Tensor, kernels: Tensor, stride=1, padding=0) -> Tensor:
    """2-D cross-correlation of `(cin, h, w)` or `(n, cin, h, w)` inputs with
    `(cout, cin, kh, kw)` kernels, zero padding."""
    return _conv(x, kernels, stride, padding, nsp=2)


def conv3d(x: Tensor, kernels: Tensor, stride=1, padding=0) -> Tensor:
    """3-D cross-correlation of `(cin, d, h, w)` or `(n, cin, d, h, w)` inputs
    with `(cout, cin, kd, kh, kw)` kernels, zero padding."""
    return _conv(x, kernels, stride, padding, nsp=3)


def _tupled(value, n: int, name: str) -> tuple:
    if isinstance(value, int):
        return (value,) * n
    value = tuple(value)
    if len(value) != n:
        raise ConfigError(f"{name} must be an int or a {n}-tuple, got {value}")
    return value


def _conv(x: Tensor, w: Tensor, stride, padding, nsp: int) -> Tensor:
    if w.ndim != nsp + 2:
        raise ShapeError(f"conv{nsp}d kernels must be {nsp + 2}-D, got {w.shape}")
    if x.ndim == nsp + 1:
        batched = False
    elif x.ndim == nsp + 2:
        batched = True
    else:
        raise ShapeError(f"conv{nsp}d input must be {nsp + 1}-D or {nsp + 2}-D, got {x.shape}")

    strides = _tupled(stride, nsp, "stride")
    pads = _tupled(padding, nsp, "padding")
    if any(s < 1 for s in strides) or any(p < 0 for p in pads):
        raise ConfigError(f"invalid stride {strides} / padding {pads}")

    xd = x.data if batched else x.data[None]
    batch, cin = xd.shape[0], xd.shape[1]
    cout, wcin = w.shape[0], w.shape[1]
    if wcin != cin:
        raise ShapeError(f"conv{nsp}d channel mismatch: input {cin}, kernels {wcin}")
    in_sp = xd.shape[2:]
    ksz = w.shape[2:]

    out_sp = []
    for size, k, s, p in zip(in_sp, ksz, strides, pads):
        span = size + 2 * p - k
        if span < 0:
            raise ConfigError(
                f"conv{nsp}d kernel {ksz} exceeds padded input {tuple(in_sp)} (padding {pads})"
            )
        if span % s != 0:
            raise ConfigError(
                f"conv{nsp}d: non-integral output size for input {size}, "
                f"kernel {k}, stride {s}, padding {p}"
            )
        out_sp.append(span // s + 1)
    out_sp = tuple(out_sp)

    xp = np.pad(xd, ((0, 0), (0, 0)) + tuple((p, p) for p in pads))
    taps = list(itertools.product(range(cin), *(range(k) for k in ksz)))
    n_taps = len(taps)
    n_pos = int(np.prod(out_sp))

    # im2col rows in channel-major tap order; this fixes the accumulation
    # order of the forward pass.
    cols = np.empty((n_taps, batch * n_pos), dtype=xd.dtype)
    tap_slices = []
    for row, tap in enumerate(taps):
        ci, offsets = tap[0], tap[1:]
        sl = (slice(None), ci) + tuple(
            slice(o, o + s * (n - 1) + 1, s) for o, s, n in zip(offsets, strides, out_sp)
        )
        tap_slices.append(sl)
        cols[row] = xp[sl].reshape(-1)

    w2 = np.ascontiguousarray(w.data.reshape(cout, n_taps))
    out2 = np.zeros((cout, batch * n_pos), dtype=xd.dtype)
    tmp = np.empty_like(out2)
    for row in range(n_taps):
        # one multiply and one add per element, tap by tap: the summation
        # order per output element is exactly the naive-loop order
        np.multiply(w2[:, row, None], cols[row], out=tmp)
        out2 += tmp

    out_data = out2.reshape(cout, batch, *out_sp).swapaxes(0, 1)
    out_data = np.ascontiguousarray(out_data if batched else out_data[0])

    xp_shape = xp.shape
    pad_strip = (slice(None), slice(None)) + tuple(
        slice(p, p + n) for p, n in zip(pads, in_sp)
    )

    def grad_fn(g):
        gb = g if batched else g[None]
        g2 = np.ascontiguousarray(gb.swapaxes(0, 1).reshape(cout, batch * n_pos))
        gw = (g2 @ cols.T).reshape(w.data.shape)
        gcols = w2.T @ g2
        gxp = np.zeros(xp_shape, dtype=xd.dtype)
        for row, sl in enumerate(tap_slices):
            gxp[sl] += gcols[row].reshape((batch,) + out_sp)
        gx = gxp[pad_strip]
        return (gx if batched else gx[0]), gw

    return _node(out_data, (x, w), f"conv{nsp}d", grad_fn)


# ----------------------------------------------------------------------
# batch normalization


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray | None = None,
    running_var: np.ndarray | None = None,
    training: bool = True,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Normalize axis 1 of `(n, c, *spatial)` input.

    Training mode standardizes with batch statistics and, when running
    buffers are supplied, folds them in with the given momentum. Eval mode
    standardizes with the running buffers. A zero-variance batch is floored
    by `eps`, so single-sample batches normalize to zero rather than fail.
    """
    if x.ndim < 2:
        raise ShapeError(f"batch_norm expects (n, c, ...) input, got {x.shape}")
    if eps <= 0:
        raise ConfigError(f"batch_norm eps must be positive, got {eps}")
    channels = x.shape[1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ShapeError(
            f"batch_norm affine shapes {gamma.shape}/{beta.shape} do not match {channels} channels"
        )
    cshape = (1, channels) + (1,) * (x.ndim - 2)
    axes = (0,) + tuple(range(2, x.ndim))

    if training:
        mean = x.mean(axis=axes, keepdims=True)
        centered = x - mean
        var = (centered * centered).mean(axis=axes, keepdims=True)
        if running_mean is not None:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mean.data.reshape(channels)
        if running_var is not None:
            running_var *= 1.0 - momentum
            running_var += momentum * var.data.reshape(channels)
        inv = (var + eps) ** -0.5
        normalized = centered * inv
    else:
        if running_mean is None or running_var is None:
            raise ContractError("eval-mode batch_norm needs running statistics")
        mean_c = Tensor(running_mean.reshape(cshape), dtype=x.dtype)
        inv_c = Tensor(1.0 / np.sqrt(running_var.reshape(cshape) + eps), dtype=x.dtype)
        normalized = (x - mean_c) * inv_c

    return normalized * gamma.reshape(cshape) + beta.reshape(cshape)


# ----------------------------------------------------------------------
# loss


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of `(n, k)` logits against int labels in 0..k-1."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects (n, k) logits, got {logits.shape}")
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy labels shape {labels.shape} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= k:
        raise ContractError(f"cross_entropy labels must lie in 0..{k - 1}")

    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    lse = np.log(ez.sum(axis=1)) + zmax[:, 0]
    nll = lse - z[np.arange(n), labels]
    data = np.asarray(nll.mean(), dtype=z.dtype)

    probs = ez / ez.sum(axis=1, keepdims=True)

    def grad_fn(g):
        gz = probs.copy()
        gz[np.arange(n), labels] -= 1.0
        gz *= g / n
        return (gz,)

    return _node(data, (logits,), "cross_entropy", grad_fn)


# ----------------------------------------------------------------------
# gradient verification


def backward(loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray | None]:
    """Run a backward sweep from `loss` and return the gradient of each
    parameter (None where a parameter is unreachable)."""
    loss.backward()
    return [p.grad for p in params]


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    theta: Tensor,
    h: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Compare the tape gradient of `f` at `theta` against central differences.

    Returns the maximum relative error over the probed coordinates (all of
    them by default; a random subset of `max_coords` for large tensors). The
    relative error of coordinate i is |fd_i - ad_i| / max(|fd_i|, |ad_i|, 1e-6).
    """
    if h <= 0:
        raise ConfigError(f"finite_diff_check step must be positive, got {h}")
    if not theta.requires_grad:
        raise ContractError("finite_diff_check needs a gradient-tracking tensor")

    theta.zero_grad()
    out = f(theta)
    if out.data.size != 1:
        raise ContractError("finite_diff_check target must return a scalar")
    out.backward()
    analytic = (
        np.zeros_like(theta.data) if theta.grad is None else theta.grad.copy()
    )

    flat = theta.data.reshape(-1)
    n = flat.size
    if max_coords is not None and max_coords < n:
        idx = np.random.default_rng(seed).choice(n, size=max_coords, replace=False)
    else:
        idx = np.arange(n)

    worst = 0.0
    an_flat = analytic.reshape(-1)
    for i in idx:
        saved = flat[i]
        flat[i] = saved + h
        with no_grad():
            f_plus = f(theta).item()
        flat[i] = saved - h
        with no_grad():
            f_minus = f(theta).item()
        flat[i] = saved
        fd = (f_plus - f_minus) / (2.0 * h)
        denom = max(abs(fd), abs(an_flat[i]), 1e-6)
        worst = max(worst, abs(fd - an_flat[i]) / denom)
    return worst
