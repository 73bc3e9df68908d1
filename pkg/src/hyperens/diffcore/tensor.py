"""Reverse-mode differentiation on float64 numpy arrays.

A :class:`Tape` records every operation executed while it is active. Each
recorded node keeps a closure mapping the upstream gradient to gradients for
its parents. A tape is consumed by exactly one call to :meth:`Tape.backward`.

Typical use::

    W = Tensor.param(np.eye(2), name="W")
    with Tape() as tape:
        loss = (x @ W).sum()
    grads = tape.backward(loss)
"""

import threading

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the named node."""


class NonFiniteError(FloatingPointError):
    """A forward value or gradient contains NaN or infinity."""


class TapeError(RuntimeError):
    """Misuse of a tape: non-scalar output, reuse after backward, ..."""


_state = threading.local()


def _active_tape():
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tape:
    def __init__(self):
        self.nodes = []
        self.consumed = False

    def __enter__(self):
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False

    def record(self, node):
        if self.consumed:
            raise TapeError("cannot record on a consumed tape")
        self.nodes.append(node)

    def backward(self, output, params=None):
        """Propagate d(output) back through the tape.

        Returns a dict ``{id(param): grad}`` for every leaf that requires a
        gradient and participated; leaves passed in ``params`` that did not
        participate get a zero gradient. Leaf ``.grad`` fields are set.
        """
        if self.consumed:
            raise TapeError("tape already consumed by a previous backward call")
        if output.values.size != 1:
            raise TapeError(f"backward needs a scalar output, got shape {output.shape}")
        self.consumed = True
        grads = {id(output): np.ones_like(output.values)}
        leaves = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None or node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if parent._backward is None:
                    leaves[key] = parent
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        if output._backward is None and output.requires_grad:
            leaves[id(output)] = output
        out = {}
        for key, leaf in leaves.items():
            leaf.grad = grads[key]
            out[key] = leaf.grad
        for p in params or ():
            if id(p) not in out:
                p.grad = np.zeros_like(p.values)
                out[id(p)] = p.grad
        for node in self.nodes:
            node._backward = None
            node._parents = ()
        return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Tensor:
    """Dense float64 array that may take part in a gradient tape."""

    __slots__ = ("values", "grad", "requires_grad", "name", "op", "differentiable",
                 "_parents", "_backward", "_tape", "__weakref__")

    __array_priority__ = 100

    def __init__(self, values, requires_grad=False, name=None):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self.op = "leaf"
        self.differentiable = True
        self._parents = ()
        self._backward = None
        self._tape = None

    @classmethod
    def param(cls, values, name=None):
        return cls(np.array(values, dtype=np.float64), requires_grad=True, name=name)

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def tape_id(self):
        return None if self._tape is None else id(self._tape)

    def numpy(self):
        return self.values

    def item(self):
        return float(self.values.reshape(()))

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    def __len__(self):
        return len(self.values)

    # arithmetic -----------------------------------------------------------
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def _make(values, parents, backward, op):
    requires = any(p.requires_grad for p in parents)
    out = Tensor(values, requires_grad=requires)
    out.op = op
    tape = _active_tape()
    if tape is not None:
        out._tape = tape
        if requires:
            out._parents = tuple(parents)
            out._backward = backward
            tape.record(out)
    return out


def _binary_values(op, fn, a, b):
    try:
        return fn(a.values, b.values)
    except ValueError as exc:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from exc


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = _binary_values("add", np.add, a, b)
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = _binary_values("sub", np.subtract, a, b)
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values
    out = _binary_values("mul", np.multiply, a, b)
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)), "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values
    out = _binary_values("div", np.divide, a, b)

    def back(g):
        return _unbroadcast(g / bv, a.shape), _unbroadcast(-g * av / (bv * bv), b.shape)

    return _make(out, (a, b), back, "div")


def power(a, p):
    a = as_tensor(a)
    av = a.values
    p = float(p)
    return _make(av ** p, (a,), lambda g: (g * p * av ** (p - 1.0),), "pow")


def square(a):
    a = as_tensor(a)
    av = a.values
    return _make(av * av, (a,), lambda g: (2.0 * g * av,), "square")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _make(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g), "matmul")


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.shape
    out = a.values.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (a,), back, "sum")


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        n = a.values.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.values)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_tensor(a)
    av = a.values
    return _make(np.log(av), (a,), lambda g: (g / av,), "log")


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.values)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a):
    a = as_tensor(a)
    mask = a.values > 0
    return _make(np.where(mask, a.values, 0.0), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a):
    a = as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-a.values))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def clip_min(a, floor):
    """max(a, floor); gradient passes only where ``a > floor``."""
    a = as_tensor(a)
    mask = a.values > floor
    return _make(np.where(mask, a.values, floor), (a,), lambda g: (g * mask,), "clip_min")


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.values.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {old} into {shape}") from exc
    return _make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None):
    a = as_tensor(a)
    out = np.transpose(a.values, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a, idx):
    a = as_tensor(a)
    shape = a.shape
    out = a.values[idx]

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _make(out, (a,), back, "getitem")


def take_rows(a, index):
    """Gather rows ``a[index]`` along axis 0; backward scatters with add."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    if index.size and (index.min() < 0 or index.max() >= a.shape[0]):
        raise IndexError(f"take_rows: index out of range [0, {a.shape[0]})")
    shape = a.shape
    out = a.values[index]

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _make(out, (a,), back, "take_rows")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.values for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from exc
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, tuple(tensors), back, "concat")


def logsumexp(a, axis=-1):
    a = as_tensor(a)
    av = a.values
    m = av.max(axis=axis, keepdims=True)
    shifted = np.exp(av - m)
    s = shifted.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)
    soft = shifted / s
    return _make(out, (a,), lambda g: (np.expand_dims(g, axis) * soft,), "logsumexp")


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    av = a.values
    m = av.max(axis=axis, keepdims=True)
    z = av - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def back(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), back, "log_softmax")


def softmax(a, axis=-1):
    return exp(log_softmax(a, axis=axis))


def argmax(a, axis=-1):
    """Non-differentiable: returns a constant tensor flagged as such."""
    a = as_tensor(a)
    out = Tensor(np.argmax(a.values, axis=axis).astype(np.float64))
    out.op = "argmax"
    out.differentiable = False
    tape = _active_tape()
    if tape is not None:
        out._tape = tape
        out._parents = (a,)
        tape.record(out)
    return out


def conv2d(x, kernel, stride=1, padding="valid"):
    """NHWC convolution (cross-correlation) with a shared (l, l, c_in, c_out) kernel."""
    from .. import kernels

    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4 or kernel.shape[0] != kernel.shape[1]:
        raise ShapeError(f"conv2d: bad shapes input {x.shape}, kernel {kernel.shape}")
    if x.shape[3] != kernel.shape[2]:
        raise ShapeError(f"conv2d: input channels {x.shape[3]} != kernel c_in {kernel.shape[2]}")
    size = kernel.shape[0]
    xv = x.values
    if padding == "same":
        lo = (size - 1) // 2
        hi = size - 1 - lo
        xv = np.pad(xv, ((0, 0), (lo, hi), (lo, hi), (0, 0)))
    elif padding != "valid":
        raise ValueError(f"conv2d: unknown padding {padding!r}")
    else:
        lo = 0
    if xv.shape[1] < size or xv.shape[2] < size:
        raise ShapeError(f"conv2d: kernel {size}x{size} larger than input {x.shape[1:3]}")
    kv = kernel.values
    out = kernels.conv2d_forward(xv, kv, stride)
    padded_shape = xv.shape

    def back(g):
        gk = kernels.conv2d_backward_kernel(xv, g, size, stride)
        gx = kernels.conv2d_backward_input(g, kv, padded_shape, stride)
        if padding == "same":
            gx = gx[:, lo:lo + x.shape[1], lo:lo + x.shape[2], :]
        return gx, gk

    return _make(out, (x, kernel), back, "conv2d")


def maxpool2d(x, size=2):
    x = as_tensor(x)
    b, h, w, c = x.shape
    ho, wo = h // size, w // size
    xv = x.values[:, :ho * size, :wo * size, :]
    blocks = xv.reshape(b, ho, size, wo, size, c)
    out = blocks.max(axis=(2, 4))
    mask = blocks == out[:, :, None, :, None, :]
    # split ties evenly so the gradient stays a valid subgradient
    mask = mask / mask.sum(axis=(2, 4), keepdims=True)

    def back(g):
        gb = mask * g[:, :, None, :, None, :]
        full = np.zeros(x.shape)
        full[:, :ho * size, :wo * size, :] = gb.reshape(b, ho * size, wo * size, c)
        return (full,)

    return _make(out, (x,), back, "maxpool2d")
