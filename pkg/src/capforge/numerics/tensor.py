"""Float64 tensors and a define-by-run gradient tape.

Ops executed while a :class:`Tape` is active (``with Tape() as tape:``) and
touching at least one ``requires_grad`` tensor are recorded in execution
order.  :func:`backward` replays them in reverse.  A tape can be replayed
once; a second ``backward`` without a fresh forward pass raises
:class:`~capforge.errors.ContractError`.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from capforge.errors import ContractError, NumericFault

_local = threading.local()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        # name of the producing op; None for leaves
        self.op: str | None = None

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool, op: str | None) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        t.op = op
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from capforge.numerics import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from capforge.numerics import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from capforge.numerics import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from capforge.numerics import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from capforge.numerics import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from capforge.numerics import ops
        return ops.matmul(self, other)

    def __getitem__(self, idx):
        from capforge.numerics import ops
        return ops.getitem(self, idx)


def _not_scalar(t: Tensor) -> float:
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64), False, None)


class _Node:
    __slots__ = ("op", "parents", "out", "backward")

    def __init__(self, op, parents, out, backward):
        self.op = op
        self.parents = parents
        self.out = out
        self.backward = backward


class Tape:
    """Ordered record of differentiable ops for one forward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.leaves: dict[int, Tensor] = {}
        self.consumed = False

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, parents: Sequence[Tensor], out: Tensor, backward: Callable) -> None:
        if self.consumed:
            raise ContractError("tape already replayed; run a fresh forward pass")
        for p in parents:
            if p.requires_grad and p.op is None:
                self.leaves.setdefault(id(p), p)
        self.nodes.append(_Node(op, tuple(parents), out, backward))


def active_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class no_tape:
    """Suspend recording inside a ``with`` block (evaluation passes)."""

    def __enter__(self):
        self._saved = getattr(_local, "stack", None)
        _local.stack = []

    def __exit__(self, *exc):
        _local.stack = self._saved


_corrupted: dict[str, float] = {}


class corrupt_gradient:
    """Test hook: scale the backward rule of ``op`` by ``factor``."""

    def __init__(self, op: str, factor: float = 1.01):
        self.op = op
        self.factor = factor

    def __enter__(self):
        _corrupted[self.op] = self.factor
        return self

    def __exit__(self, *exc):
        _corrupted.pop(self.op, None)


def check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericFault(f"non-finite value produced by op '{op}'")


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``.grad`` on every grad-tracking tensor the tape touched."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise ContractError("backward already ran on this tape; re-run the forward pass")
    if not any(n.out is loss for n in reversed(tape.nodes)):
        raise ContractError("loss was not produced on this tape")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            node.out.grad = np.zeros_like(node.out.data)
            continue
        node.out.grad = g
        parent_grads = node.backward(g)
        if node.op in _corrupted:
            parent_grads = [None if pg is None else pg * _corrupted[node.op] for pg in parent_grads]
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            check_finite(pg, node.op + " (backward)")
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for key, leaf in tape.leaves.items():
        g = grads.get(key)
        leaf.grad = np.zeros_like(leaf.data) if g is None else np.array(g, dtype=np.float64).reshape(leaf.shape)
