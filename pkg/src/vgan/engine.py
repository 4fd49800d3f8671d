"""Reverse-mode autodiff engine on dense NumPy buffers.

A ``Tensor`` wraps an ndarray (float32 for training, float64 for
verification) and records a define-by-run graph: each operation stores its
parents and a closure that routes the output gradient back to them.
``Tensor.backward`` walks the graph once in reverse topological order and
accumulates gradients additively across fan-out. The graph is rebuilt on
every forward pass and is confined to a single thread.

``finite_diff_check`` is the central-difference oracle used by the gradcheck
registry and the verification suite.
"""

import numpy as np


class ContractViolation(ValueError):
    """An operation was called outside its stated preconditions."""


class ConfigError(ValueError):
    """A configuration value is inconsistent or unusable."""


_GRAD_ENABLED = [True]


class no_grad:
    """Context manager that disables graph recording."""

    def __enter__(self):
        self._prev = _GRAD_ENABLED[0]
        _GRAD_ENABLED[0] = False
        return self

    def __exit__(self, *exc):
        _GRAD_ENABLED[0] = self._prev
        return False


def is_grad_enabled():
    return _GRAD_ENABLED[0]


def _as_float_array(data, dtype=None):
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_float_array(data, dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _tracked(self):
        return self.requires_grad or bool(self._parents)

    def backward(self):
        if self.data.size != 1:
            raise ContractViolation(
                f"backward requires a scalar loss, got shape {self.shape}"
            )
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited and p._tracked():
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # arithmetic (definitions below, attached at module bottom)
    def __add__(self, other):
        return add(self, _coerce(other, self.dtype))

    def __radd__(self, other):
        return add(_coerce(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _coerce(other, self.dtype))

    def __rsub__(self, other):
        return sub(_coerce(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _coerce(other, self.dtype))

    def __rmul__(self, other):
        return mul(_coerce(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _coerce(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_coerce(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_const(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def abs(self):
        return tensor_abs(self)


def _coerce(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def make_op(data, parents, backward):
    """Build the output tensor of a primitive op, recording the graph edge.

    ``backward`` takes the output gradient array and must route contributions
    into each tracked parent via ``add_grad``. Recording is skipped when no
    parent is tracked or grads are globally disabled, so constants stay
    constant.
    """
    out = Tensor(data)
    if _GRAD_ENABLED[0] and any(p._tracked() for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def add_grad(t, g):
    if not t._tracked():
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g, shape):
    """Reduce a gradient back to the shape of a broadcast operand."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] > 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b):
    def bwd(g):
        add_grad(a, _unbroadcast(g, a.shape))
        add_grad(b, _unbroadcast(g, b.shape))

    return make_op(a.data + b.data, (a, b), bwd)


def sub(a, b):
    def bwd(g):
        add_grad(a, _unbroadcast(g, a.shape))
        add_grad(b, _unbroadcast(-g, b.shape))

    return make_op(a.data - b.data, (a, b), bwd)


def mul(a, b):
    def bwd(g):
        add_grad(a, _unbroadcast(g * b.data, a.shape))
        add_grad(b, _unbroadcast(g * a.data, b.shape))

    return make_op(a.data * b.data, (a, b), bwd)


def div(a, b):
    def bwd(g):
        add_grad(a, _unbroadcast(g / b.data, a.shape))
        add_grad(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return make_op(a.data / b.data, (a, b), bwd)


def neg(a):
    def bwd(g):
        add_grad(a, -g)

    return make_op(-a.data, (a,), bwd)


def pow_const(a, p):
    p = float(p)

    def bwd(g):
        add_grad(a, g * p * np.power(a.data, p - 1.0))

    return make_op(np.power(a.data, p), (a,), bwd)


def matmul(a, b):
    def bwd(g):
        add_grad(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        add_grad(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return make_op(a.data @ b.data, (a, b), bwd)


def tensor_sum(a, axis=None, keepdims=False):
    axes = axis if axis is None else (axis if isinstance(axis, tuple) else (axis,))

    def bwd(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        add_grad(a, np.broadcast_to(g, a.shape).copy())

    return make_op(a.data.sum(axis=axes, keepdims=keepdims), (a,), bwd)


def tensor_mean(a, axis=None, keepdims=False):
    axes = axis if axis is None else (axis if isinstance(axis, tuple) else (axis,))
    if axes is None:
        count = a.size
    else:
        count = int(np.prod([a.shape[i] for i in axes]))

    def bwd(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        add_grad(a, np.broadcast_to(g / count, a.shape).copy())

    return make_op(a.data.mean(axis=axes, keepdims=keepdims), (a,), bwd)


def reshape(a, shape):
    def bwd(g):
        add_grad(a, g.reshape(a.shape))

    return make_op(a.data.reshape(shape), (a,), bwd)


def transpose(a, axes):
    inv = tuple(np.argsort(axes))

    def bwd(g):
        add_grad(a, g.transpose(inv))

    return make_op(a.data.transpose(axes), (a,), bwd)


def concat(tensors, axis):
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            add_grad(t, g[tuple(idx)])

    return make_op(
        np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bwd
    )


def narrow(a, axis, start, length):
    """Contiguous slice [start, start+length) along one axis."""
    if not -a.ndim <= axis < a.ndim:
        raise ContractViolation(f"narrow axis {axis} invalid for rank {a.ndim}")
    if start < 0 or start + length > a.shape[axis]:
        raise ContractViolation(
            f"narrow [{start}:{start + length}) out of range for axis {axis} "
            f"of extent {a.shape[axis]}"
        )
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def bwd(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[idx] = g
        add_grad(a, full)

    return make_op(a.data[idx].copy(), (a,), bwd)


def exp(a):
    y = np.exp(a.data)

    def bwd(g):
        add_grad(a, g * y)

    return make_op(y, (a,), bwd)


def log(a):
    def bwd(g):
        add_grad(a, g / a.data)

    return make_op(np.log(a.data), (a,), bwd)


def tensor_abs(a):
    def bwd(g):
        add_grad(a, g * np.sign(a.data))

    return make_op(np.abs(a.data), (a,), bwd)


def clip(a, lo, hi):
    """Clamp values to [lo, hi]; gradient is zero in the clamped region."""
    inside = (a.data > lo) & (a.data < hi)

    def bwd(g):
        add_grad(a, g * inside)

    return make_op(np.clip(a.data, lo, hi), (a,), bwd)


def finite_diff_check(f, x, eps=1e-5, sample=None, rng=None):
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a Tensor to a scalar Tensor and must be deterministic; this is
    verified by evaluating twice and requiring bitwise equality. ``x`` must be
    float64. The error at each checked coordinate is
    ``|ga - gn| / max(1, |ga|, |gn|)``. With ``sample`` set, only that many
    randomly chosen coordinates are differenced (for large inputs); the
    analytic gradient is always full.
    """
    x = np.asarray(x, dtype=np.float64)
    if not 1e-6 <= eps <= 1e-3:
        raise ContractViolation(f"eps {eps} outside [1e-6, 1e-3]")
    with no_grad():
        y0 = f(Tensor(x)).data
        y1 = f(Tensor(x)).data
    if y0.size != 1:
        raise ContractViolation("finite_diff_check requires a scalar-valued f")
    if not np.array_equal(y0, y1):
        raise ContractViolation("f is not deterministic; oracle result invalid")

    xt = Tensor(x.copy(), requires_grad=True)
    out = f(xt)
    out.backward()
    ga = xt.grad if xt.grad is not None else np.zeros_like(x)

    flat_indices = np.arange(x.size)
    if sample is not None and sample < x.size:
        rng = rng if rng is not None else np.random.default_rng(0)
        flat_indices = rng.choice(x.size, size=sample, replace=False)

    max_err = 0.0
    flat = x.reshape(-1)
    ga_flat = ga.reshape(-1)
    with no_grad():
        for idx in flat_indices:
            bump = flat.copy()
            bump[idx] += eps
            fp = f(Tensor(bump.reshape(x.shape))).item()
            bump[idx] -= 2 * eps
            fm = f(Tensor(bump.reshape(x.shape))).item()
            gn = (fp - fm) / (2 * eps)
            gav = ga_flat[idx]
            err = abs(gav - gn) / max(1.0, abs(gav), abs(gn))
            max_err = max(max_err, err)
    return max_err
