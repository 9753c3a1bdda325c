"""Minimal reverse-mode autodiff on numpy arrays.

Every op records its parents and a closure mapping the output gradient
to per-parent gradients. backward() on a scalar walks the graph in
reverse topological order and accumulates into .grad, so calling it
twice doubles the gradients. Subgraphs that cannot reach a parameter
are skipped entirely. Gradients share the tensor's dtype: float64 for
finite-difference checks, float32 for training throughput.
"""

import numpy as np
from scipy.special import erf as _erf

from ..errors import NonScalarLossError, ShapeMismatchError

DTYPES = {"f32": np.float32, "f64": np.float64}


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to `shape` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._grad_fn = None

    # -- bookkeeping -------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g.astype(self.data.dtype, copy=False)

    def backward(self) -> None:
        """Reverse-mode accumulation from a scalar into every reachable
        requires_grad leaf. Leaf .grad accumulates across calls (two
        backward passes double it); per-pass gradients of interior nodes
        are not retained. Unreachable parameters are left untouched
        (treat a missing .grad as zero)."""
        if self.size != 1:
            raise NonScalarLossError(f"backward() needs a scalar, got shape {self.shape}")
        topo, visited, stack = [], set(), [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited and p.requires_grad:
                    stack.append((p, False))
        flowing: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = flowing.pop(id(node), None)
            if g is None:
                continue
            if node._grad_fn is None:
                if node.requires_grad:
                    node._accumulate(g)
                continue
            for parent, pg in node._grad_fn(g):
                if not parent.requires_grad:
                    continue
                if id(parent) in flowing:
                    flowing[id(parent)] = flowing[id(parent)] + pg
                else:
                    flowing[id(parent)] = pg

    # -- arithmetic ----------------------------------------------------------

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        other = self._coerce(other)
        return _node(
            self.data + other.data,
            (self, other),
            lambda g: ((self, _unbroadcast(g, self.shape)), (other, _unbroadcast(g, other.shape))),
        )

    __radd__ = __add__

    def __neg__(self):
        return _node(-self.data, (self,), lambda g: ((self, -g),))

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return self._coerce(other) + (-self)

    def __mul__(self, other):
        other = self._coerce(other)
        return _node(
            self.data * other.data,
            (self, other),
            lambda g: (
                (self, _unbroadcast(g * other.data, self.shape)),
                (other, _unbroadcast(g * self.data, other.shape)),
            ),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        return _node(
            self.data / other.data,
            (self, other),
            lambda g: (
                (self, _unbroadcast(g / other.data, self.shape)),
                (other, _unbroadcast(-g * self.data / (other.data**2), other.shape)),
            ),
        )

    def __rtruediv__(self, other):
        return self._coerce(other) / self

    def __pow__(self, p):
        assert np.isscalar(p), "only scalar exponents are supported"
        return _node(self.data**p, (self,), lambda g: ((self, g * p * self.data ** (p - 1)),))

    def __matmul__(self, other):
        other = self._coerce(other)
        return _node(
            np.matmul(self.data, other.data),
            (self, other),
            lambda g: (
                (self, _unbroadcast(np.matmul(g, np.swapaxes(other.data, -1, -2)), self.shape)),
                (other, _unbroadcast(np.matmul(np.swapaxes(self.data, -1, -2), g), other.shape)),
            ),
        )

    def __getitem__(self, key):
        def gf(g):
            full = np.zeros_like(self.data)
            np.add.at(full, key, g)
            return ((self, full),)

        return _node(self.data[key], (self,), gf)

    # -- shape ops -------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return _node(self.data.reshape(shape), (self,), lambda g: ((self, g.reshape(old)),))

    def transpose(self, axes):
        inv = tuple(np.argsort(axes))
        return _node(self.data.transpose(axes), (self,), lambda g: ((self, g.transpose(inv)),))

    def swapaxes(self, a, b):
        return _node(np.swapaxes(self.data, a, b), (self,), lambda g: ((self, np.swapaxes(g, a, b)),))

    def broadcast_to(self, shape):
        return _node(
            np.broadcast_to(self.data, shape).copy(),
            (self,),
            lambda g: ((self, _unbroadcast(g, self.shape)),),
        )

    # -- reductions --------------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        def gf(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return ((self, np.broadcast_to(g, self.shape).copy()),)

        return _node(self.data.sum(axis=axis, keepdims=keepdims), (self,), gf)

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            count = self.size
        else:
            count = int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return self.sum(axis=axis, keepdims=keepdims) / float(count)

    # -- elementwise ---------------------------------------------------------------

    def exp(self):
        val = np.exp(self.data)
        return _node(val, (self,), lambda g: ((self, g * val),))

    def log(self):
        return _node(np.log(self.data), (self,), lambda g: ((self, g / self.data),))

    def sqrt(self):
        val = np.sqrt(self.data)
        return _node(val, (self,), lambda g: ((self, g * (0.5 / val)),))

    def erf(self):
        coef = 2.0 / np.sqrt(np.pi)
        return _node(
            _erf(self.data).astype(self.data.dtype),
            (self,),
            lambda g: ((self, g * coef * np.exp(-self.data**2)),),
        )

    def tanh(self):
        val = np.tanh(self.data)
        return _node(val, (self,), lambda g: ((self, g * (1.0 - val**2)),))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _node(data, parents, grad_fn) -> Tensor:
    t = Tensor(data)
    if any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._grad_fn = grad_fn
    return t


# -- free functions -------------------------------------------------------


def constant(data, dtype=None) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype))


def parameter(data, dtype=None) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


def concat(tensors, axis=0) -> Tensor:
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def gf(g):
        return tuple(zip(tensors, np.split(g, splits, axis=axis)))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), gf)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows along axis -2: x [..., L, D], idx [..., K] -> [..., K, D]."""
    idx = np.asarray(idx)
    if idx.ndim != x.ndim - 1:
        raise ShapeMismatchError(f"gather_rows: idx ndim {idx.ndim} vs x ndim {x.ndim}")

    def gf(g):
        full = np.zeros_like(x.data)
        np.add.at(full, _row_index(full.shape, idx), g)
        return ((x, full),)

    return _node(np.take_along_axis(x.data, idx[..., None], axis=-2), (x,), gf)


def _row_index(shape, idx):
    """Fancy-index tuple addressing rows idx along axis -2 of `shape`."""
    lead = shape[:-2]
    grids = np.meshgrid(*[np.arange(s) for s in lead], np.arange(idx.shape[-1]), indexing="ij")
    return tuple(grids[:-1]) + (idx,)


def softmax(x: Tensor, axis=-1) -> Tensor:
    # shifting by a detached max is exact: softmax is shift-invariant
    shift = Tensor(x.data.max(axis=axis, keepdims=True))
    e = (x - shift).exp()
    return e / e.sum(axis=axis, keepdims=True)


def gelu(x: Tensor) -> Tensor:
    return x * 0.5 * ((x * (1.0 / np.sqrt(2.0))).erf() + 1.0)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / (var + eps).sqrt() * gain + bias


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = x @ weight
    if bias is not None:
        out = out + bias
    return out
