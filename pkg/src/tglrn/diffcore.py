"""Reverse-mode automatic differentiation over float64 numpy arrays.

A small tape-based engine: each operation returns a new :class:`Tensor`
holding the forward value, references to its parent tensors, and a
closure that maps the output gradient back onto the parents. Calling
``backward()`` on a scalar tensor walks the recorded tape in reverse
topological order and accumulates gradients into every reachable
:class:`Parameter`.

Everything is computed in 64-bit floats so that central finite
differences with step 1e-5 resolve analytic gradients to relative
errors well below 1e-4. Forward evaluation is bitwise deterministic for
fixed inputs; no operation draws randomness.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, StateError

__all__ = [
    "Tensor",
    "Parameter",
    "Linear",
    "no_grad",
    "concat",
    "stack",
    "einsum2",
    "softmax",
    "safe_recip",
    "rsqrt_or_zero",
    "sigmoid",
    "tanh",
    "relu",
    "exp",
    "log",
    "sqrt",
    "absolute",
]

_GRAD_ENABLED = [True]


class no_grad:
    """Context manager that disables tape recording (cheap eval passes)."""

    def __enter__(self):
        self._prev = _GRAD_ENABLED[0]
        _GRAD_ENABLED[0] = False
        return self

    def __exit__(self, *exc):
        _GRAD_ENABLED[0] = self._prev
        return False


def _as_array(x):
    return np.asarray(x, dtype=np.float64)


def _ensure_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(grad.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(op, a_shape, b_shape):
    try:
        return np.broadcast_shapes(a_shape, b_shape)
    except ValueError:
        raise ConfigError(f"{op}: shapes {a_shape} and {b_shape} are not broadcastable") from None


class Tensor:
    """A float64 array plus the tape bookkeeping needed for backward()."""

    __slots__ = ("data", "grad", "_parents", "_bwd", "_track")

    def __init__(self, data):
        self.data = _as_array(data)
        self.grad = None
        self._parents = ()
        self._bwd = None
        self._track = False

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _from_op(data, parents, bwd):
        out = Tensor(data)
        if _GRAD_ENABLED[0] and any(p._track for p in parents):
            out._parents = tuple(parents)
            out._bwd = bwd
            out._track = True
        return out

    def _acc(self, g):
        if not self._track:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    # -- basic properties -----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, track={self._track})"

    def detach(self):
        """A view of the same values with no tape attached."""
        return Tensor(self.data)

    # -- arithmetic -----------------------------------------------------------

    def __add__(self, other):
        other = _ensure_tensor(other)
        _check_broadcast("add", self.shape, other.shape)
        a, b = self, other

        def bwd(g):
            a._acc(_unbroadcast(g, a.shape))
            b._acc(_unbroadcast(g, b.shape))

        return Tensor._from_op(a.data + b.data, (a, b), bwd)

    __radd__ = __add__

    def __sub__(self, other):
        other = _ensure_tensor(other)
        _check_broadcast("sub", self.shape, other.shape)
        a, b = self, other

        def bwd(g):
            a._acc(_unbroadcast(g, a.shape))
            b._acc(-_unbroadcast(g, b.shape))

        return Tensor._from_op(a.data - b.data, (a, b), bwd)

    def __rsub__(self, other):
        return _ensure_tensor(other).__sub__(self)

    def __mul__(self, other):
        other = _ensure_tensor(other)
        _check_broadcast("mul", self.shape, other.shape)
        a, b = self, other

        def bwd(g):
            a._acc(_unbroadcast(g * b.data, a.shape))
            b._acc(_unbroadcast(g * a.data, b.shape))

        return Tensor._from_op(a.data * b.data, (a, b), bwd)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _ensure_tensor(other)
        _check_broadcast("div", self.shape, other.shape)
        a, b = self, other
        out_data = a.data / b.data

        def bwd(g):
            a._acc(_unbroadcast(g / b.data, a.shape))
            b._acc(_unbroadcast(-g * out_data / b.data, b.shape))

        return Tensor._from_op(out_data, (a, b), bwd)

    def __rtruediv__(self, other):
        return _ensure_tensor(other).__truediv__(self)

    def __neg__(self):
        a = self

        def bwd(g):
            a._acc(-g)

        return Tensor._from_op(-a.data, (a,), bwd)

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise ConfigError("pow: only scalar exponents are supported")
        a, c = self, float(exponent)

        def bwd(g):
            a._acc(g * c * a.data ** (c - 1.0))

        return Tensor._from_op(a.data ** c, (a,), bwd)

    def __matmul__(self, other):
        other = _ensure_tensor(other)
        a, b = self, other
        if a.ndim < 2 or b.ndim < 2:
            raise ConfigError("matmul: operands must have at least 2 dimensions")
        if a.shape[-1] != b.shape[-2]:
            raise ConfigError(f"matmul: inner dimensions {a.shape} @ {b.shape} do not match")
        _check_broadcast("matmul", a.shape[:-2], b.shape[:-2])

        def bwd(g):
            a._acc(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
            b._acc(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

        return Tensor._from_op(a.data @ b.data, (a, b), bwd)

    # -- shape ops ------------------------------------------------------------

    def __getitem__(self, idx):
        a = self
        out_data = a.data[idx]

        def bwd(g):
            buf = np.zeros_like(a.data)
            np.add.at(buf, idx, g)
            a._acc(buf)

        return Tensor._from_op(out_data, (a,), bwd)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        old_shape = a.shape

        def bwd(g):
            a._acc(g.reshape(old_shape))

        return Tensor._from_op(a.data.reshape(shape), (a,), bwd)

    def transpose(self, axes):
        a = self
        axes = tuple(axes)
        inv = tuple(np.argsort(axes))

        def bwd(g):
            a._acc(g.transpose(inv))

        return Tensor._from_op(a.data.transpose(axes), (a,), bwd)

    def broadcast_to(self, shape):
        a = self
        shape = tuple(shape)

        def bwd(g):
            a._acc(_unbroadcast(g, a.shape))

        return Tensor._from_op(np.broadcast_to(a.data, shape).copy(), (a,), bwd)

    # -- reductions -----------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        a = self

        def bwd(g):
            if axis is None:
                a._acc(np.broadcast_to(g, a.shape).copy())
                return
            gg = g
            if not keepdims:
                gg = np.expand_dims(gg, axis)
            a._acc(np.broadcast_to(gg, a.shape).copy())

        return Tensor._from_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), bwd)

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            n = self.size
        else:
            ax = axis if isinstance(axis, tuple) else (axis,)
            n = 1
            for i in ax:
                n *= self.shape[i]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- elementwise nonlinearities --------------------------------------------

    def sigmoid(self):
        a = self
        z = np.exp(-np.abs(a.data))
        out_data = np.where(a.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))

        def bwd(g):
            a._acc(g * out_data * (1.0 - out_data))

        return Tensor._from_op(out_data, (a,), bwd)

    def tanh(self):
        a = self
        out_data = np.tanh(a.data)

        def bwd(g):
            a._acc(g * (1.0 - out_data * out_data))

        return Tensor._from_op(out_data, (a,), bwd)

    def relu(self):
        a = self

        def bwd(g):
            a._acc(g * (a.data > 0))

        return Tensor._from_op(np.maximum(a.data, 0.0), (a,), bwd)

    def exp(self):
        a = self
        out_data = np.exp(a.data)

        def bwd(g):
            a._acc(g * out_data)

        return Tensor._from_op(out_data, (a,), bwd)

    def log(self):
        a = self

        def bwd(g):
            a._acc(g / a.data)

        return Tensor._from_op(np.log(a.data), (a,), bwd)

    def sqrt(self):
        a = self
        out_data = np.sqrt(a.data)

        def bwd(g):
            a._acc(g * 0.5 / out_data)

        return Tensor._from_op(out_data, (a,), bwd)

    def abs(self):
        a = self

        def bwd(g):
            a._acc(g * np.sign(a.data))

        return Tensor._from_op(np.abs(a.data), (a,), bwd)

    def clamp(self, lo, hi):
        a = self
        inside = (a.data > lo) & (a.data < hi)

        def bwd(g):
            a._acc(g * inside)

        return Tensor._from_op(np.clip(a.data, lo, hi), (a,), bwd)

    # -- backward pass ----------------------------------------------------------

    def backward(self):
        """Populate gradients of every tracked tensor reachable from this scalar."""
        if self.data.size != 1:
            raise StateError("backward requires a scalar loss tensor")
        if not self._track:
            raise StateError("backward before forward: no gradient tape recorded for this tensor")

        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p._track and id(p) not in visited:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._bwd is not None:
                node._bwd(node.grad)


class Parameter(Tensor):
    """A learnable tensor with a persistent gradient buffer and a unique name."""

    __slots__ = ("name",)

    def __init__(self, data, name=""):
        super().__init__(data)
        self._track = True
        self.grad = np.zeros_like(self.data)
        self.name = name

    def zero_grad(self):
        self.grad.fill(0.0)

    def __repr__(self):
        return f"Parameter(name={self.name!r}, shape={self.data.shape})"


# -- free functions ------------------------------------------------------------


def sigmoid(x):
    return _ensure_tensor(x).sigmoid()


def tanh(x):
    return _ensure_tensor(x).tanh()


def relu(x):
    return _ensure_tensor(x).relu()


def exp(x):
    return _ensure_tensor(x).exp()


def log(x):
    return _ensure_tensor(x).log()


def sqrt(x):
    return _ensure_tensor(x).sqrt()


def absolute(x):
    return _ensure_tensor(x).abs()


def concat(tensors, axis=-1):
    tensors = [_ensure_tensor(t) for t in tensors]
    datas = [t.data for t in tensors]
    ref = list(datas[0].shape)
    ax = axis % len(ref)
    for d in datas[1:]:
        other = list(d.shape)
        if len(other) != len(ref) or other[:ax] + other[ax + 1 :] != ref[:ax] + ref[ax + 1 :]:
            raise ConfigError(f"concat: incompatible shapes {[tuple(x.shape) for x in datas]}")
    out_data = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            t._acc(g[tuple(idx)])

    return Tensor._from_op(out_data, tuple(tensors), bwd)


def stack(tensors, axis=0):
    tensors = [_ensure_tensor(t) for t in tensors]
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def bwd(g):
        for i, t in enumerate(tensors):
            t._acc(np.take(g, i, axis=axis))

    return Tensor._from_op(out_data, tuple(tensors), bwd)


def einsum2(subscripts, a, b):
    """Two-operand einsum with exact reverse-mode gradients.

    Restricted to subscripts where no index repeats within an operand and
    every input index appears in the output or in the other operand, which
    makes both gradients expressible as einsums themselves.
    """
    a, b = _ensure_tensor(a), _ensure_tensor(b)
    try:
        inputs, out_sub = subscripts.split("->")
        sub_a, sub_b = inputs.split(",")
    except ValueError:
        raise ConfigError(f"einsum2: malformed subscripts {subscripts!r}") from None
    for sub in (sub_a, sub_b, out_sub):
        if len(set(sub)) != len(sub):
            raise ConfigError(f"einsum2: repeated index within one operand in {subscripts!r}")
    if not set(sub_a) <= set(sub_b) | set(out_sub) or not set(sub_b) <= set(sub_a) | set(out_sub):
        raise ConfigError(f"einsum2: {subscripts!r} sums an index visible in only one operand")
    if len(sub_a) != a.ndim or len(sub_b) != b.ndim:
        raise ConfigError(f"einsum2: operand ranks do not match {subscripts!r}")

    out_data = np.einsum(subscripts, a.data, b.data)

    def bwd(g):
        a._acc(np.einsum(f"{out_sub},{sub_b}->{sub_a}", g, b.data))
        b._acc(np.einsum(f"{sub_a},{out_sub}->{sub_b}", a.data, g))

    return Tensor._from_op(out_data, (a, b), bwd)


def softmax(x, axis=-1):
    a = _ensure_tensor(x)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        a._acc(out_data * (g - inner))

    return Tensor._from_op(out_data, (a,), bwd)


def safe_recip(x):
    """1/x where x is nonzero, 0 where x is exactly zero."""
    a = _ensure_tensor(x)
    out_data = np.divide(1.0, a.data, out=np.zeros_like(a.data), where=a.data != 0)

    def bwd(g):
        a._acc(-g * out_data * out_data)

    return Tensor._from_op(out_data, (a,), bwd)


def rsqrt_or_zero(x, threshold=0.0):
    """x**-0.5 where x > threshold, 0 elsewhere (gradient 0 on the zero branch)."""
    a = _ensure_tensor(x)
    live = a.data > threshold
    out_data = np.where(live, 1.0 / np.sqrt(np.where(live, a.data, 1.0)), 0.0)

    def bwd(g):
        a._acc(-0.5 * g * out_data ** 3)

    return Tensor._from_op(out_data, (a,), bwd)


class Linear:
    """Affine map on the last axis: x @ w + b, Glorot-uniform initialized."""

    def __init__(self, in_dim, out_dim, rng, bias=True):
        limit = np.sqrt(6.0 / (in_dim + out_dim))
        self.w = Parameter(rng.uniform(-limit, limit, size=(in_dim, out_dim)))
        self.b = Parameter(np.zeros(out_dim)) if bias else None
        self.in_dim = in_dim
        self.out_dim = out_dim

    def __call__(self, x):
        x = _ensure_tensor(x)
        if x.shape[-1] != self.in_dim:
            raise ConfigError(
                f"linear: input feature size {x.shape[-1]} does not match weight {self.in_dim}"
            )
        out = x @ self.w
        if self.b is not None:
            out = out + self.b
        return out

    def params(self):
        named = [("w", self.w)]
        if self.b is not None:
            named.append(("b", self.b))
        return named
