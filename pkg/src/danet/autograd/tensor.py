"""Dense tensor with reverse-mode differentiation over a recorded tape."""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_seq = itertools.count()
_local = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording on the current thread."""
    prev = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Node:
    """One recorded operation: its inputs and the rule mapping output grad to input grads."""

    __slots__ = ("seq", "op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: Sequence["Tensor"], backward_fn: Callable):
        self.seq = next(_seq)
        self.op = op
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn


class Tensor:
    """N-D float array that optionally participates in gradient recording.

    ``data`` is a numpy array in row-major order; ``grad`` is populated by
    :func:`backward` for tensors with ``requires_grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.dtype not in (np.float32, np.float64):
            raise TypeError(f"unsupported dtype {arr.dtype}; expected float32 or float64")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators (implemented in functional) -------------------------
    def __add__(self, other):
        from . import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from . import functional as F
        return F.sub(other, self)

    def __mul__(self, other):
        from . import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import functional as F
        return F.mul(self, -1.0)

    def sum(self):
        from . import functional as F
        return F.sum(self)

    def mean(self):
        from . import functional as F
        return F.mean(self)

    def reshape(self, *shape):
        from . import functional as F
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def make_result(data: np.ndarray, inputs: Sequence[Tensor], op: str, backward_fn: Callable) -> Tensor:
    """Wrap an op's output and record it on the tape when any input needs grad."""
    out = Tensor(data, dtype=data.dtype)
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(op, inputs, backward_fn)
    return out


class Tape:
    """Operations reachable from a root, ordered so every op follows its inputs.

    Nodes carry a global creation sequence number, so sorting by it yields a
    valid topological order of the recorded computation.
    """

    def __init__(self, nodes: list):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        seen = set()
        nodes = []
        stack = [root]
        while stack:
            t = stack.pop()
            node = t._node
            if node is None or id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append((node, t))
            stack.extend(node.inputs)
        nodes.sort(key=lambda pair: pair[0].seq)
        return cls(nodes)

    def __len__(self) -> int:
        return len(self.nodes)

    def run_backward(self, root: Tensor, seed: np.ndarray) -> None:
        grads = {id(root): seed}
        for node, out in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = node.backward_fn(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if ig.shape != inp.shape:
                    raise RuntimeError(
                        f"{node.op}: gradient shape {ig.shape} does not match input {inp.shape}"
                    )
                if inp._node is None:
                    _accumulate_leaf(inp, ig)
                else:
                    key = id(inp)
                    if key in grads:
                        grads[key] = grads[key] + ig
                    else:
                        grads[key] = ig


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = g.astype(t.data.dtype, copy=False)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def backward(root: Tensor, leaves: Optional[Sequence[Tensor]] = None) -> None:
    """Populate ``.grad`` on every ``requires_grad`` leaf reachable from ``root``.

    Gradients accumulate into existing ``.grad`` arrays; call ``zero_grad``
    between steps. Any tensor in ``leaves`` that no path reaches is given a
    zero gradient.
    """
    if root.data.size != 1:
        raise ValueError(f"backward() needs a scalar root, got shape {root.shape}")
    if root.requires_grad:
        seed = np.ones_like(root.data)
        if root._node is None:
            _accumulate_leaf(root, seed)
        else:
            Tape.from_root(root).run_backward(root, seed)
    for leaf in leaves or ():
        if leaf.requires_grad and leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)
