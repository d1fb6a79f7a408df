"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

The graph is built define-by-run: every op records a closure that knows how
to push gradients back to its parents. This is enough to train the three
small MLPs used by the tree generator, and keeps every run deterministic.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an op."""

    def __init__(self, op: str, *shapes):
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(s) for s in shapes)}")
        self.op = op
        self.shapes = shapes


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A dense float64 array plus the bookkeeping for reverse-mode AD."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple = (), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = parents
        self._backward = backward

    # -- construction helpers ------------------------------------------------

    @staticmethod
    def lift(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        other = Tensor.lift(other)
        try:
            data = self.data + other.data
        except ValueError:
            raise ShapeError("add", self.shape, other.shape)
        out = _node(data, "add", (self, other))
        if out.requires_grad:
            def backward(g):
                if self.requires_grad:
                    self._accumulate(_unbroadcast(g, self.shape))
                if other.requires_grad:
                    other._accumulate(_unbroadcast(g, other.shape))
            out._backward = backward
        return out

    __radd__ = __add__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-Tensor.lift(other))

    def __rsub__(self, other):
        return Tensor.lift(other) + (-self)

    def __mul__(self, other):
        other = Tensor.lift(other)
        try:
            data = self.data * other.data
        except ValueError:
            raise ShapeError("mul", self.shape, other.shape)
        out = _node(data, "mul", (self, other))
        if out.requires_grad:
            def backward(g):
                if self.requires_grad:
                    self._accumulate(_unbroadcast(g * other.data, self.shape))
                if other.requires_grad:
                    other._accumulate(_unbroadcast(g * self.data, other.shape))
            out._backward = backward
        return out

    __rmul__ = __mul__

    def __matmul__(self, other):
        other = Tensor.lift(other)
        a, b = self.data, other.data
        if a.shape[-1] != b.shape[0]:
            raise ShapeError("matmul", self.shape, other.shape)
        out = _node(a @ b, "matmul", (self, other))
        if out.requires_grad:
            def backward(g):
                if self.requires_grad:
                    if b.ndim == 1:
                        self._accumulate(np.outer(g, b) if a.ndim == 2 else g * b)
                    else:
                        self._accumulate(np.atleast_1d(g) @ b.T if a.ndim > 1 else b @ g)
                if other.requires_grad:
                    if a.ndim == 1:
                        other._accumulate(np.outer(a, g) if b.ndim == 2 else g * a)
                    else:
                        other._accumulate(a.T @ g)
            out._backward = backward
        return out

    def __getitem__(self, key):
        out = _node(self.data[key], "slice", (self,))
        if out.requires_grad:
            def backward(g):
                full = np.zeros_like(self.data)
                np.add.at(full, key, g)
                self._accumulate(full)
            out._backward = backward
        return out

    # -- elementwise nonlinearities -------------------------------------------

    def relu(self):
        out = _node(np.maximum(self.data, 0.0), "relu", (self,))
        if out.requires_grad:
            def backward(g):
                self._accumulate(g * (self.data > 0))
            out._backward = backward
        return out

    def sigmoid(self):
        s = _sigmoid(self.data)
        out = _node(s, "sigmoid", (self,))
        if out.requires_grad:
            def backward(g):
                self._accumulate(g * s * (1.0 - s))
            out._backward = backward
        return out

    def log(self):
        out = _node(np.log(self.data), "log", (self,))
        if out.requires_grad:
            def backward(g):
                self._accumulate(g / self.data)
            out._backward = backward
        return out

    def abs(self):
        out = _node(np.abs(self.data), "abs", (self,))
        if out.requires_grad:
            def backward(g):
                self._accumulate(g * np.sign(self.data))
            out._backward = backward
        return out

    def square(self):
        out = _node(self.data * self.data, "square", (self,))
        if out.requires_grad:
            def backward(g):
                self._accumulate(g * 2.0 * self.data)
            out._backward = backward
        return out

    # -- reductions and shape ops ----------------------------------------------

    def sum(self):
        out = _node(self.data.sum(), "sum", (self,))
        if out.requires_grad:
            def backward(g):
                self._accumulate(np.full_like(self.data, float(g)))
            out._backward = backward
        return out

    def mean_rows(self):
        """Mean over axis 0; each row receives 1/n of the output gradient."""
        if self.data.ndim != 2:
            raise ShapeError("mean_rows", self.shape)
        n = self.data.shape[0]
        out = _node(self.data.mean(axis=0), "mean_rows", (self,))
        if out.requires_grad:
            def backward(g):
                self._accumulate(np.broadcast_to(g / n, self.data.shape).copy())
            out._backward = backward
        return out

    def subset_mean_rows(self, idx):
        """Mean over the rows listed in `idx` (nonempty integer index array)."""
        idx = np.asarray(idx, dtype=np.intp)
        if idx.size == 0:
            raise ValueError("subset_mean_rows: empty index set")
        out = _node(self.data[idx].mean(axis=0), "subset_mean_rows", (self,))
        if out.requires_grad:
            def backward(g):
                full = np.zeros_like(self.data)
                np.add.at(full, idx, np.broadcast_to(g / idx.size, (idx.size,) + g.shape))
                self._accumulate(full)
            out._backward = backward
        return out

    def softmax(self):
        """Row-wise (last axis) softmax with max-subtraction for stability."""
        z = self.data - self.data.max(axis=-1, keepdims=True)
        e = np.exp(z)
        s = e / e.sum(axis=-1, keepdims=True)
        out = _node(s, "softmax", (self,))
        if out.requires_grad:
            def backward(g):
                dot = (g * s).sum(axis=-1, keepdims=True)
                self._accumulate(s * (g - dot))
            out._backward = backward
        return out

    # -- straight-through estimators -------------------------------------------

    def st_onehot(self):
        """Forward: one-hot at argmax; backward: identity (straight-through)."""
        hard = np.zeros_like(self.data)
        hard[np.argmax(self.data)] = 1.0
        out = _node(hard, "st_onehot", (self,))
        if out.requires_grad:
            def backward(g):
                self._accumulate(g)
            out._backward = backward
        return out

    def st_step(self):
        """Forward: 1[x >= 0]; backward: derivative of sigmoid(x)."""
        s = _sigmoid(self.data)
        out = _node((self.data >= 0.0).astype(np.float64), "st_step", (self,))
        if out.requires_grad:
            def backward(g):
                self._accumulate(g * s * (1.0 - s))
            out._backward = backward
        return out


def _node(data, op, parents):
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, op=op, parents=parents if req else ())


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [Tensor.lift(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    out = _node(data, "concat", tuple(tensors))
    if out.requires_grad:
        sizes = [t.data.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)

        def backward(g):
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    sl = [slice(None)] * g.ndim
                    sl[axis] = slice(lo, hi)
                    t._accumulate(g[tuple(sl)])
        out._backward = backward
    return out


def backward(loss: Tensor):
    """Accumulate d(loss)/d(p) into `.grad` of every reachable tensor."""
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    topo = []
    visited = set()
    stack = [(loss, False)]
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
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))
    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)


class Adam:
    """Adam with bias correction; step() consumes and zeroes the gradients."""

    def __init__(self, params, learning_rate: float = 3e-4,
                 beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        self.params = list(params)
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            m_hat = self.m[i] / (1 - b1 ** self.step_count)
            v_hat = self.v[i] / (1 - b2 ** self.step_count)
            p.data -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.epsilon)
            p.grad = None
