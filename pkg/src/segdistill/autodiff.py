"""Tape-based reverse-mode differentiation.

A :class:`Tape` records operations in construction order; :func:`backward`
replays the exact reverse order, accumulating gradients additively wherever
a tensor fans out into several consumers.  Operations register themselves
through :func:`attach`, which pairs an already-computed output array with a
closure producing the input gradients.

Recording is ambient: ops look up the innermost active tape, so model code
does not thread a tape argument around.  Frozen subgraphs run inside
:func:`stop_recording`.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericFaultError


class Tensor:
    """A numpy array plus gradient metadata.

    ``requires_grad`` marks tensors that gradients must flow into; it is
    propagated automatically to op outputs.  ``grad`` is populated by
    :func:`backward` for every requires-grad tensor on the loss path.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # Convenience arithmetic used by tests and loss assembly; heavy lifting
    # lives in ops.py.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)


class Node(NamedTuple):
    output: Tensor
    inputs: tuple
    backward: Callable


class Tape:
    """Ordered record of operations for one differentiable computation."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)


_STACK: list[Tape | None] = []


def active_tape() -> Tape | None:
    return _STACK[-1] if _STACK else None


@contextmanager
def record(tape: Tape | None = None):
    """Activate ``tape`` (a fresh one by default) for the enclosed ops."""
    tape = tape if tape is not None else Tape()
    _STACK.append(tape)
    try:
        yield tape
    finally:
        _STACK.pop()


@contextmanager
def stop_recording():
    """Suspend recording; ops behave as plain array functions inside."""
    _STACK.append(None)
    try:
        yield
    finally:
        _STACK.pop()


def attach(data, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap a computed array as the output of a differentiable op.

    ``backward(grad_out) -> list[ndarray | None]`` must return one gradient
    per entry of ``inputs`` (None for inputs that do not need one).  The node
    is only recorded when a tape is active and some input requires grad.
    """
    tape = active_tape()
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs and tape is not None)
    if out.requires_grad:
        tape.nodes.append(Node(out, tuple(inputs), backward))
    return out


def backward(tape: Tape, loss: Tensor, params: Sequence[Tensor] = ()) -> None:
    """Populate ``.grad`` for every requires-grad tensor reachable from ``loss``.

    Tensors in ``params`` that the loss never touched receive explicit zero
    gradients.  Gradients keep the dtype of the tensors they belong to.
    """
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not np.isfinite(loss.data).all():
        raise NumericFaultError("backward called on a non-finite loss")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g_out = grads.pop(id(node.output), None)
        holders.pop(id(node.output), None)
        if g_out is None:
            continue  # not on the path from loss
        node.output.grad = g_out
        for tensor, g_in in zip(node.inputs, node.backward(g_out)):
            if g_in is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            if key in grads:
                grads[key] = grads[key] + g_in
            else:
                grads[key] = g_in
                holders[key] = tensor
    for key, tensor in holders.items():
        tensor.grad = grads[key]
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)


def grad_check(fn: Callable, inputs: Sequence[Tensor], h: float = 1e-5) -> float:
    """Compare tape gradients of ``fn(*inputs)`` against central differences.

    ``fn`` must build a scalar loss from the given tensors under the ambient
    tape and be deterministic; a second evaluation that disagrees with the
    first raises :class:`ContractError`.  Inputs are checked in double
    precision.  Returns the maximum elementwise relative error
    ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    inputs = [Tensor(np.asarray(t.data, dtype=np.float64), requires_grad=True)
              for t in inputs]

    def run():
        with record() as tape:
            out = fn(*inputs)
        if not isinstance(out, Tensor) or out.data.size != 1:
            raise ContractError("grad_check closure must return a scalar Tensor")
        return tape, float(out.data), out

    tape, base, out = run()
    _, base2, _ = run()
    if base2 != base:
        raise ContractError("grad_check closure is not deterministic "
                            f"({base!r} vs {base2!r})")

    for t in inputs:
        t.grad = None
    backward(tape, out, params=inputs)
    analytic = [t.grad.copy() for t in inputs]

    worst = 0.0
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            with stop_recording():
                f_plus = float(fn(*inputs).data)
            flat[i] = keep - h
            with stop_recording():
                f_minus = float(fn(*inputs).data)
            flat[i] = keep
            numeric = (f_plus - f_minus) / (2.0 * h)
            a_i = float(a.reshape(-1)[i])
            err = abs(a_i - numeric) / max(abs(a_i), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
