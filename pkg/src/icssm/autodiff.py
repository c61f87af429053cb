"""Reverse-mode automatic differentiation over dense float64 arrays.

Tensors wrap numpy arrays and record a tape of op nodes; calling
``backward()`` on a scalar output accumulates gradients into every
reachable tensor with ``requires_grad``.  Every op validates that its
output is finite; NaN/Inf anywhere is treated as a hard error.
"""
from __future__ import annotations

import numpy as np


class NumericError(RuntimeError):
    """Raised when an operation produces non-finite values."""


def _check_finite(data: np.ndarray, opname: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by op '{opname}'")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to the original shape."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A dense float64 array plus optional autodiff bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None,
                 _opname: str = "tensor"):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, _opname)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- graph traversal ----------------------------------------------
    def backward(self) -> None:
        """Accumulate gradients of this scalar into all reachable tensors."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def zero_grad(self) -> None:
        self.grad = None

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
        else:
            self.grad = self.grad + g

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return tsum(self, axis=axis)

    def mean(self, axis=None):
        return tmean(self, axis=axis)


class Parameter(Tensor):
    """A named learnable tensor; names are stable checkpoint keys."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.data.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward, opname):
    out = Tensor(data, _parents=parents, _backward=backward, _opname=opname)
    return out


# -- elementwise arithmetic -------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g * a.data / (b.data ** 2), b.data.shape))

    return _make(data, (a, b), backward, "div")


def square(a) -> Tensor:
    a = as_tensor(a)
    data = a.data ** 2

    def backward(g):
        if a.requires_grad:
            a._accum(g * 2.0 * a.data)

    return _make(data, (a,), backward, "square")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data @ b.data

    def backward(g):
        if a.data.ndim == 1 and b.data.ndim == 2:
            if a.requires_grad:
                a._accum(g @ b.data.T)
            if b.requires_grad:
                b._accum(np.outer(a.data, g))
        elif a.data.ndim == 2 and b.data.ndim == 1:
            if a.requires_grad:
                a._accum(np.outer(g, b.data))
            if b.requires_grad:
                b._accum(a.data.T @ g)
        else:
            if a.requires_grad:
                a._accum(g @ b.data.T)
            if b.requires_grad:
                b._accum(a.data.T @ g)

    return _make(data, (a, b), backward, "matmul")


# -- reductions and shaping -------------------------------------------

def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis)

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accum(np.broadcast_to(g, a.data.shape).copy())
        else:
            a._accum(np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy())

    return _make(data, (a,), backward, "sum")


def tmean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a._accum(g.reshape(a.data.shape))

    return _make(data, (a,), backward, "reshape")


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    data = a.data[idx]

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            a._accum(full)

    return _make(data, (a,), backward, "getitem")


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accum(g[tuple(sl)])

    return _make(data, tuple(tensors), backward, "concat")


def stack(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        moved = np.moveaxis(g, axis, 0)
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accum(moved[i])

    return _make(data, tuple(tensors), backward, "stack")


def gather_rows(table, ids) -> Tensor:
    """Embedding lookup: rows of `table` at integer `ids`."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    data = table.data[ids]

    def backward(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, ids, g)
            table._accum(full)

    return _make(data, (table,), backward, "gather_rows")


# -- transcendental activations ---------------------------------------

def exp(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a._accum(g * data)

    return _make(data, (a,), backward, "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError("log requires strictly positive input")
    data = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            a._accum(g / a.data)

    return _make(data, (a,), backward, "log")


def log1p(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= -1.0):
        raise ValueError("log1p requires input > -1")
    data = np.log1p(a.data)

    def backward(g):
        if a.requires_grad:
            a._accum(g / (1.0 + a.data))

    return _make(data, (a,), backward, "log1p")


def sin(a) -> Tensor:
    a = as_tensor(a)
    data = np.sin(a.data)

    def backward(g):
        if a.requires_grad:
            a._accum(g * np.cos(a.data))

    return _make(data, (a,), backward, "sin")


def cos(a) -> Tensor:
    a = as_tensor(a)
    data = np.cos(a.data)

    def backward(g):
        if a.requires_grad:
            a._accum(-g * np.sin(a.data))

    return _make(data, (a,), backward, "cos")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    data = np.tanh(a.data)

    def backward(g):
        if a.requires_grad:
            a._accum(g * (1.0 - data ** 2))

    return _make(data, (a,), backward, "tanh")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    data = _sigmoid_np(a.data)

    def backward(g):
        if a.requires_grad:
            a._accum(g * data * (1.0 - data))

    return _make(data, (a,), backward, "sigmoid")


def silu(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid_np(a.data)
    data = a.data * s

    def backward(g):
        if a.requires_grad:
            a._accum(g * (s + a.data * s * (1.0 - s)))

    return _make(data, (a,), backward, "silu")


def _softplus_np(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def softplus(a) -> Tensor:
    a = as_tensor(a)
    data = _softplus_np(a.data)

    def backward(g):
        if a.requires_grad:
            a._accum(g * _sigmoid_np(a.data))

    return _make(data, (a,), backward, "softplus")


def rsqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError("rsqrt requires strictly positive input")
    data = 1.0 / np.sqrt(a.data)

    def backward(g):
        if a.requires_grad:
            a._accum(-0.5 * g * data / a.data)

    return _make(data, (a,), backward, "rsqrt")


def logsumexp(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    data = np.squeeze(m, axis=axis) + np.log(
        np.exp(a.data - m).sum(axis=axis))

    def backward(g):
        if a.requires_grad:
            soft = np.exp(a.data - np.expand_dims(data, axis))
            a._accum(np.expand_dims(g, axis) * soft)

    return _make(data, (a,), backward, "logsumexp")


# -- structured ops ----------------------------------------------------

def causal_conv1d(x, kernel) -> Tensor:
    """Per-channel causal convolution with implicit left zero-padding.

    out[t, c] = sum_{w < W} kernel[c, w] * x[t - w, c], with x[<0] = 0.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    L, C = x.data.shape
    Ck, W = kernel.data.shape
    if Ck != C:
        raise ValueError(f"kernel channels {Ck} != input channels {C}")
    if W < 1:
        raise ValueError("kernel width must be >= 1")
    data = np.zeros((L, C))
    for w in range(W):
        if w == 0:
            data += kernel.data[:, 0] * x.data
        else:
            data[w:] += kernel.data[:, w] * x.data[:-w]

    def backward(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            for w in range(W):
                if w == 0:
                    gx += kernel.data[:, 0] * g
                else:
                    gx[:-w] += kernel.data[:, w] * g[w:]
            x._accum(gx)
        if kernel.requires_grad:
            gk = np.zeros_like(kernel.data)
            for w in range(W):
                if w == 0:
                    gk[:, 0] = (g * x.data).sum(axis=0)
                else:
                    gk[:, w] = (g[w:] * x.data[:-w]).sum(axis=0)
            kernel._accum(gk)

    return _make(data, (x, kernel), backward, "causal_conv1d")


def grad_check(computation, params, eps: float = 1e-5) -> float:
    """Max relative error between analytic gradients and central differences.

    `computation` is a zero-argument callable returning a scalar Tensor; it
    must read the current `.data` of each parameter on every call.
    """
    if not 1e-6 <= eps <= 1e-4:
        raise ValueError("eps must lie in [1e-6, 1e-4]")
    out = computation()
    if out.data.size != 1:
        raise ValueError("grad_check requires a scalar-valued computation")
    for p in params:
        p.zero_grad()
    out = computation()
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for p in params]
    max_rel = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = computation().item()
            flat[i] = orig - eps
            fm = computation().item()
            flat[i] = orig
            fd = (fp - fm) / (2 * eps)
            if not np.isfinite(fd):
                raise NumericError("non-finite finite-difference estimate")
            rel = abs(ga.reshape(-1)[i] - fd) / max(1.0, abs(fd))
            max_rel = max(max_rel, rel)
    return max_rel
