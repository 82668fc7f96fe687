"""Dense float64 tensors with tape-based reverse-mode autodiff.

Everything in the tracker (weights, activations, losses) lives in these
tensors. Gradients are computed by recording each differentiable op on an
active :class:`Tape` and replaying the records in reverse creation order,
which is a valid reverse topological order because operands always exist
before their results.

Tapes are thread-local: independent models may run on distinct threads,
each with its own tape. Tensors are treated as immutable once recorded.
"""

from __future__ import annotations

import threading

import numpy as np

_LOCAL = threading.local()


def _tape_stack() -> list:
    stack = getattr(_LOCAL, "tapes", None)
    if stack is None:
        stack = []
        _LOCAL.tapes = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of differentiable operations.

    Used as a context manager::

        with Tape() as tape:
            loss = model(...)
            tape.backward(loss)
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self, "tape stack corrupted"
        return False

    def backward(self, loss: "Tensor") -> None:
        """Accumulate gradients of a scalar loss into every reachable tensor."""
        if loss.data.size != 1:
            raise ValueError("backward requires a scalar loss")
        if not loss.requires_grad:
            raise ValueError("loss does not require grad (nothing recorded)")
        loss.grad = np.ones_like(loss.data)
        # Reverse creation order == reverse topological order; each node
        # is visited exactly once.
        for node in reversed(self.nodes):
            if node.grad is not None and node._bwd is not None:
                node._bwd(node.grad)

    def clear(self) -> None:
        for node in self.nodes:
            node._bwd = None
        self.nodes.clear()


class Tensor:
    """N-d array of float64 values, optionally carrying a gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_bwd")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._bwd = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def param(data) -> "Tensor":
        return Tensor(data, requires_grad=True)

    # -- bookkeeping -----------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            # copy: g may alias an upstream buffer that later mutates
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        tape = active_tape()
        if tape is None:
            raise RuntimeError("backward() outside of an active Tape")
        tape.backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class no_grad:
    """Context manager that suspends recording on the current thread.

    Implemented by pushing a ``None`` entry onto the tape stack, which
    :func:`record` treats the same as having no tape at all.
    """

    def __enter__(self) -> "no_grad":
        _tape_stack().append(None)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is None, "tape stack corrupted"
        return False


def astensor(x) -> Tensor:
    """Coerce arrays/scalars to a constant Tensor; pass tensors through."""
    return x if isinstance(x, Tensor) else Tensor(x)


def record(out: Tensor, parents: tuple, bwd) -> Tensor:
    """Mark ``out`` differentiable and register its backward rule.

    No-op when no tape is active or no parent requires grad, so inference
    runs without any recording overhead.
    """
    tape = active_tape()
    if tape is None:
        return out
    if not any(p.requires_grad for p in parents):
        return out
    out.requires_grad = True
    out._bwd = bwd
    tape.nodes.append(out)
    return out
