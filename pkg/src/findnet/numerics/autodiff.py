"""Tape-based reverse-mode differentiation over numpy arrays.

Every differentiable operation returns a :class:`Node` that remembers its
inputs and a closure computing the vector-Jacobian product.  Node ids are
handed out from a monotone counter, so sorting reachable nodes by id in
descending order is a valid reverse topological order.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

_ids = itertools.count()

# op names whose adjoint is deliberately corrupted (debug hook for gradcheck)
_BROKEN: set[str] = set()


class ContractError(ValueError):
    """Raised when an autodiff call violates its contract."""


class Node:
    """A value in the computation graph."""

    __slots__ = ("id", "op", "inputs", "value", "requires_grad", "_grad", "_vjp")

    def __init__(self, value, op: str = "leaf", inputs: Sequence["Node"] = (),
                 vjp: Callable | None = None, requires_grad: bool = False):
        self.id = next(_ids)
        self.op = op
        self.value = np.asarray(value, dtype=np.float64)
        self.inputs = tuple(inputs)
        self.requires_grad = requires_grad
        self._vjp = vjp
        self._grad = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    def zero_grad(self):
        self._grad = None

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op!r}, shape={self.shape})"

    # arithmetic sugar; the implementations live in ops
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
        return ops.neg(self)


def constant(value) -> Node:
    return Node(value, op="const")


def parameter(value) -> Node:
    """Leaf node that accumulates a gradient."""
    return Node(np.array(value, dtype=np.float64), op="param", requires_grad=True)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def record(op: str, value, inputs: Sequence[Node], vjp: Callable) -> Node:
    """Create the output node of ``op``.

    ``vjp(g)`` must return one gradient (or None) per input.  The closure is
    only kept when some input needs a gradient.
    """
    needs = any(n.requires_grad for n in inputs)
    if needs and op in _BROKEN:
        good = vjp

        def vjp(g, _good=good):
            return tuple(None if r is None else 1.5 * r + 1e-3 for r in _good(g))
    return Node(value, op=op, inputs=inputs if needs else (),
                vjp=vjp if needs else None, requires_grad=needs)


@contextlib.contextmanager
def break_adjoint(*names: str):
    """Corrupt the adjoints of the named ops while the context is active."""
    added = [n for n in names if n not in _BROKEN]
    _BROKEN.update(added)
    try:
        yield
    finally:
        _BROKEN.difference_update(added)


def backward(loss: Node, free: bool = True) -> None:
    """Accumulate d(loss)/d(node) into ``grad`` of every reachable node.

    With ``free`` the vjp closures of interior nodes are dropped afterwards,
    releasing the tape.
    """
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    seen: dict[int, Node] = {}
    stack = [loss]
    while stack:
        n = stack.pop()
        if n.id in seen or not n.requires_grad:
            continue
        seen[n.id] = n
        stack.extend(n.inputs)
    order = sorted(seen.values(), key=lambda n: n.id, reverse=True)

    loss._grad = np.ones_like(loss.value)
    for n in order:
        if n._vjp is None or n._grad is None:
            continue
        grads = n._vjp(n._grad)
        for inp, g in zip(n.inputs, grads):
            if g is None or not inp.requires_grad:
                continue
            if g.shape != inp.value.shape:
                raise ContractError(
                    f"adjoint of {n.op} produced shape {g.shape} for input {inp.shape}")
            inp._grad = g.copy() if inp._grad is None else inp._grad + g
        if free:
            n._vjp = None
            n.inputs = ()


def grad_check(f: Callable[[Node], Node], x, step: float = 1e-5,
               coords: Iterable[int] | None = None) -> float:
    """Max relative error between the tape gradient and central differences.

    ``coords`` restricts the comparison to a subset of flat indices.
    """
    x = np.array(x, dtype=np.float64)
    p = parameter(x)
    loss = f(p)
    backward(loss)
    analytic = p.grad.ravel()

    idx = range(x.size) if coords is None else coords
    worst = 0.0
    flat = x.ravel()
    for i in idx:
        orig = flat[i]
        flat[i] = orig + step
        up = float(f(constant(flat.reshape(x.shape))).value)
        flat[i] = orig - step
        down = float(f(constant(flat.reshape(x.shape))).value)
        flat[i] = orig
        numeric = (up - down) / (2 * step)
        a = analytic[i]
        err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
        worst = max(worst, err)
    return worst
