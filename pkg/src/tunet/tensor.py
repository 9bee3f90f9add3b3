"""Dense tensors with a define-by-run reverse-mode differentiation graph.

A :class:`Tensor` wraps a contiguous row-major numpy array. Every differentiable
operation in :mod:`tunet.ops` creates a new tensor that remembers its inputs and
a closure mapping the upstream gradient to gradients for each input. Calling
:meth:`Tensor.backward` on a scalar walks that graph in reverse topological
order, visiting each node once and summing contributions from every consumer.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import GraphError

_state = threading.local()


def _get(name, default):
    return getattr(_state, name, default)


def get_default_dtype() -> np.dtype:
    return _get("dtype", np.dtype(np.float32))


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}")
    _state.dtype = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the floating point precision used for new tensors."""
    previous = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = previous


def is_grad_enabled() -> bool:
    return _get("grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording, e.g. for validation and inference."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


@contextlib.contextmanager
def debug_checks(enabled: bool = True) -> Iterator[None]:
    """Make every kernel assert that its output is finite."""
    previous = _get("debug", False)
    _state.debug = enabled
    try:
        yield
    finally:
        _state.debug = previous


class BranchRecorder:
    """Collects the discrete choices (ReLU masks, pooling argmaxes) of a forward pass.

    Finite differences are only meaningful when a perturbation does not move an
    input across one of these branch points, so gradient checks compare the
    recorded signatures of the perturbed passes against the base pass.
    """

    def __init__(self):
        self.records: list[np.ndarray] = []

    def add(self, arr: np.ndarray) -> None:
        self.records.append(np.array(arr, copy=True))

    def signature(self) -> tuple:
        return tuple(r.tobytes() for r in self.records)


@contextlib.contextmanager
def record_branches() -> Iterator[BranchRecorder]:
    previous = _get("recorder", None)
    rec = BranchRecorder()
    _state.recorder = rec
    try:
        yield rec
    finally:
        _state.recorder = previous


def _note_branch(arr: np.ndarray) -> None:
    rec = _get("recorder", None)
    if rec is not None:
        rec.add(arr)


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """N-dimensional array node in the differentiation graph.

    Args:
        data: array-like payload; floating inputs are cast to the default precision.
        requires_grad: whether gradients should be accumulated into ``grad``.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, *, op: str = "leaf",
                 parents: tuple["Tensor", ...] = (), backward: BackwardFn | None = None,
                 dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind in "fiub":
            arr = arr.astype(get_default_dtype(), copy=False)
        if not arr.flags.c_contiguous:
            arr = arr.copy(order="C")
        if any(s < 1 for s in arr.shape):
            raise ValueError(f"all shape entries must be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = op
        self._parents = parents
        self._backward = backward
        self._released = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{flag})"

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data) if self.requires_grad else None

    def _accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise GraphError(f"gradient shape {g.shape} does not match value shape {self.shape} in {self.op}")
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, seed=None) -> None:
        """Propagate gradients from this node to every leaf that requires them.

        Args:
            seed: upstream gradient; defaults to ones, which for a scalar loss
                gives d(loss)/d(leaf).

        Raises:
            GraphError: if the node carries no recorded graph, or the graph has
                already been consumed by an earlier call.
        """
        if not self.requires_grad:
            raise GraphError("backward() called on a tensor that was not produced by a recorded forward pass")
        if self._released:
            raise GraphError("backward() called twice on the same graph; run the forward pass again")
        if seed is None:
            seed = np.ones_like(self.data)
        seed = np.asarray(seed, dtype=self.data.dtype)
        if seed.shape != self.shape:
            raise GraphError(f"seed shape {seed.shape} does not match {self.shape}")

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): seed}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if node._backward is None:
                if g is not None and node.requires_grad:
                    node._accumulate(g)
                continue
            if g is None:
                node._release()
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            node._release()

    def _release(self) -> None:
        self._backward = None
        self._parents = ()
        self._released = True


class Parameter(Tensor):
    """Trainable leaf tensor.

    ``decay`` marks kernel matrices that receive the L2 penalty.
    """

    def __init__(self, data, decay: bool = False):
        super().__init__(data, requires_grad=True)
        self.decay = decay
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter(shape={self.shape}, dtype={self.dtype}, decay={self.decay})"


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn, op: str) -> Tensor:
    """Wrap an op result, recording the graph edge only when some input needs gradients."""
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, op=op, parents=tuple(parents),
                      backward=backward, dtype=data.dtype)
    return Tensor(data, op=op, dtype=data.dtype)
