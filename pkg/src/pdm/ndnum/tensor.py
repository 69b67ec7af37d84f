"""Dense tensor with define-by-run reverse-mode differentiation."""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from pdm.errors import ContractViolation

_SEQ = itertools.count()

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """An n-dimensional float array that may carry a gradient.

    Tensors produced by differentiable ops remember their parents and a
    closure mapping the output gradient to parent gradients. ``seq`` is a
    global creation counter, so sorting by it recovers execution order.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "seq")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.seq = next(_SEQ)

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Iterable["Tensor"], backward: BackwardFn) -> "Tensor":
        parents = tuple(parents)
        out = cls(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from pdm.ndnum import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from pdm.ndnum import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from pdm.ndnum import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from pdm.ndnum import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from pdm.ndnum import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from pdm.ndnum import ops
        return ops.div(other, self)

    def __neg__(self):
        from pdm.ndnum import ops
        return ops.neg(self)

    def __pow__(self, exponent: float):
        from pdm.ndnum import ops
        return ops.power(self, exponent)

    def __matmul__(self, other):
        from pdm.ndnum import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from pdm.ndnum import ops
        return ops.getitem(self, index)

    def reshape(self, *shape):
        from pdm.ndnum import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from pdm.ndnum import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    @property
    def T(self):
        return self.transpose()

    def sum(self, axis=None, keepdims=False):
        from pdm.ndnum import ops
        return ops.reduce("sum", self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from pdm.ndnum import ops
        return ops.reduce("mean", self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Differentiable operations reachable from an output, in execution order.

    Built on demand from the parent links of the output, so every forward
    pass produces a fresh tape.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, output: Tensor) -> "Tape":
        seen: dict[int, Tensor] = {}
        stack = [output]
        while stack:
            node = stack.pop()
            if id(node) in seen or not node.requires_grad:
                continue
            seen[id(node)] = node
            stack.extend(node._parents)
        return cls(sorted(seen.values(), key=lambda t: t.seq))

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    def reverse(self):
        return reversed(self.nodes)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf]


def backward(loss: Tensor, leaves: Iterable[Tensor] | None = None) -> Tape:
    """Populate ``.grad`` on every requires-grad leaf reachable from ``loss``.

    Gradients are added to any existing ``.grad``. Leaves passed in
    ``leaves`` that the loss does not reach get a zero gradient.
    """
    if loss.data.size != 1:
        raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = Tape.from_output(loss)
    if not tape.nodes:
        raise ContractViolation("loss does not depend on any tensor that requires grad")

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in tape.reverse():
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg

    if leaves is not None:
        for leaf in leaves:
            if leaf.requires_grad and leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)
    return tape
