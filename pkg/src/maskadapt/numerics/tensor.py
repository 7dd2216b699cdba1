"""Dense tensors with define-by-run reverse-mode differentiation."""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_ids = itertools.count()
_grad_enabled = True


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording inside the block (evaluation, teacher passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A numpy array plus the bookkeeping needed to backpropagate through it.

    ``data`` is never mutated by ops; every op returns a fresh Tensor.  Leaves
    created with ``requires_grad=True`` receive an accumulated ``grad`` array
    after :meth:`backward`.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self._id = next(_ids)

    # -- basic info -------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    def backward(self, grad: Optional[np.ndarray] = None) -> "GradTape":
        """Backpropagate from this tensor; scalar outputs get an implicit seed of 1."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() without a seed needs a scalar output, got shape {self.shape}")
            grad = np.ones_like(self.data)
        tape = GradTape.from_output(self)
        tape.backward(self, np.asarray(grad, dtype=self.dtype))
        return tape

    # -- operator sugar (implemented in ops) -----------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __truediv__(self, other):
        from . import ops
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return ops.mul(self, 1.0 / other)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, idx):
        from . import ops
        return ops.getitem(self, idx)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    """Wrap an op result; records it on the tape when any parent needs gradients.

    ``backward(g)`` must return one gradient (or None) per parent.
    """
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


class GradTape:
    """Ordered record of the op nodes reachable from one output.

    Nodes are sorted by creation order, which is a topological order because an
    op's inputs always exist before its output.
    """

    def __init__(self, nodes: list):
        self.nodes = nodes
        self.visits = 0

    @classmethod
    def from_output(cls, out: Tensor) -> "GradTape":
        seen = {}
        stack = [out]
        while stack:
            t = stack.pop()
            if t._id in seen or not t.requires_grad:
                continue
            seen[t._id] = t
            stack.extend(t._parents)
        return cls(sorted(seen.values(), key=lambda t: t._id))

    def backward(self, out: Tensor, seed: np.ndarray) -> None:
        grads = {out._id: seed}
        for node in reversed(self.nodes):
            g = grads.pop(node._id, None)
            if g is None:
                continue
            self.visits += 1
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise DimensionError(f"gradient shape {pg.shape} does not match input shape {parent.shape}")
                prev = grads.get(parent._id)
                grads[parent._id] = pg if prev is None else prev + pg
