"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every operation records an analytic backward rule on a small graph of
``Tensor`` nodes; ``Tensor.backward()`` walks the graph in reverse
topological order and accumulates gradients into ``.grad``. Fused
primitives (matmul, softmax, layer_norm) keep the hot paths at BLAS
speed instead of composing them from scalar ops.
"""

from contextlib import contextmanager

import numpy as np

_grad_enabled = True


def tune_allocator(threshold_bytes=1 << 30):
    """Raise glibc's mmap threshold so large activation temporaries are
    recycled through the heap instead of mmap/munmap page-fault churn.

    Training allocates tens of ~40MB arrays per step; above glibc's 32MB
    dynamic cap every one costs a fresh mmap. No-op off glibc.
    """
    try:
        import ctypes

        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(ctypes.c_int(-3), ctypes.c_int(threshold_bytes))  # M_MMAP_THRESHOLD
        libc.mallopt(ctypes.c_int(-1), ctypes.c_int(threshold_bytes))  # M_TRIM_THRESHOLD
        return True
    except Exception:
        return False


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled():
    return _grad_enabled


class Tensor:
    """A numpy array plus an accumulated gradient and a backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={'set' if self.grad is not None else 'none'})"

    def backward(self, seed=None):
        """Reverse-accumulate gradients from this node to all leaves."""
        if seed is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            seed = np.ones_like(self.data)
        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.grad = np.asarray(seed, dtype=self.data.dtype)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar; full implementations below
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


def _wrap(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if isinstance(like, Tensor) else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward):
    """Build a result node, recording the graph only when it can matter."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] > 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _accumulate(tensor, grad):
    if tensor.requires_grad or tensor._parents:
        tensor.grad = grad if tensor.grad is None else tensor.grad + grad


def _wrap_pair(a, b):
    if not isinstance(a, Tensor):
        a = _wrap(a, b if isinstance(b, Tensor) else None)
    if not isinstance(b, Tensor):
        b = _wrap(b, a)
    return a, b


def add(a, b):
    a, b = _wrap_pair(a, b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = _wrap_pair(a, b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = _wrap_pair(a, b)

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), backward)


def div(a, b):
    a, b = _wrap_pair(a, b)

    def backward(g):
        _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(a.data / b.data, (a, b), backward)


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)

    def backward(g):
        _accumulate(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        _accumulate(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    return _make(a.data @ b.data, (a, b), backward)


def relu(x):
    x = _wrap(x)
    mask = x.data > 0

    def backward(g):
        _accumulate(x, g * mask)

    return _make(np.where(mask, x.data, 0), (x,), backward)


def sqrt(x):
    x = _wrap(x)
    out_data = np.sqrt(x.data)

    def backward(g):
        _accumulate(x, g * (0.5 / out_data))

    return _make(out_data, (x,), backward)


def softmax(x):
    """Row-stochastic softmax over the last axis."""
    x = _wrap(x)
    s = x.data - x.data.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)

    def backward(g):
        gs = g * s
        inner = gs.sum(axis=-1, keepdims=True)
        gs -= inner * s
        _accumulate(x, gs)

    return _make(s, (x,), backward)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize each row (last axis) to zero mean / unit variance, then scale."""
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.data.dtype))
    xhat = centered * inv

    def backward(g):
        dxhat = g * gain.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        _accumulate(x, dx)
        _accumulate(gain, _unbroadcast(g * xhat, gain.data.shape))
        _accumulate(bias, _unbroadcast(g, bias.data.shape))

    return _make(xhat * gain.data + bias.data, (x, gain, bias), backward)


def dropout(x, rate, rng):
    """Inverted dropout: zero with probability ``rate``, scale by 1/keep."""
    if rate <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit rng stream")
    x = _wrap(x)
    keep = 1.0 - rate
    rand_dtype = np.float32 if x.data.dtype == np.float32 else np.float64
    mask = rng.random(x.data.shape, dtype=rand_dtype) < keep
    scale = np.asarray(1.0 / keep, dtype=x.data.dtype)

    def backward(g):
        gx = g * mask
        gx *= scale
        _accumulate(x, gx)

    out = x.data * mask
    out *= scale
    return _make(out, (x,), backward)


def reshape(x, shape):
    x = _wrap(x)
    old = x.data.shape

    def backward(g):
        _accumulate(x, g.reshape(old))

    return _make(x.data.reshape(shape), (x,), backward)


def transpose(x, axes):
    x = _wrap(x)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accumulate(x, g.transpose(inverse))

    return _make(x.data.transpose(axes), (x,), backward)


def reduce_sum(x, axis=None, keepdims=False):
    x = _wrap(x)
    shape = x.data.shape

    def backward(g):
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        _accumulate(x, np.broadcast_to(g, shape).copy())

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), backward)


def reduce_mean(x, axis=None, keepdims=False):
    x = _wrap(x)
    shape = x.data.shape
    if axis is None:
        count = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([shape[i] for i in axes]))

    def backward(g):
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        _accumulate(x, np.broadcast_to(g / count, shape).copy())

    return _make(x.data.mean(axis=axis, keepdims=keepdims), (x,), backward)


def take(x, idx):
    """Basic slicing/indexing; gradient scatters back into place."""
    x = _wrap(x)
    shape = x.data.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.add.at(gx, idx, g)
        _accumulate(x, gx)

    return _make(x.data[idx], (x,), backward)


def stack(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]

    def backward(g):
        for i, t in enumerate(tensors):
            _accumulate(t, np.take(g, i, axis=axis))

    return _make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def custom_op(data, parents, backward):
    """Hook for modules defining their own fused primitives (e.g. warping)."""
    return _make(data, tuple(parents), backward)
