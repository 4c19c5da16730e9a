"""Tape-based reverse-mode automatic differentiation over dense float64 arrays.

Every value that participates in a differentiable computation lives on a
:class:`Tape` as a node.  Leaves carry data (optionally marked trainable);
interior nodes are produced by a small, closed set of primitives.  Calling
``backward`` on a scalar root walks the tape once in reverse, accumulating
vector-Jacobian products in a fixed (index-descending, argument-ascending)
order so that repeated runs over an identical tape give bit-identical
gradients.

The primitive set is deliberately tiny: matrix multiply, broadcasting
add/subtract/multiply, elementwise tanh/square/exp, multiplication by a
Python scalar, and full reductions (sum, mean).  Higher-level code expresses
everything, including the spatial-derivative propagation of the network
module, in terms of these, so plain first-order reverse mode is all that is
ever needed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["Tape", "TapeError", "Node", "as_tensor"]

# Canonical op-kind strings.  `record` accepts exactly these.
OPS = (
    "leaf",
    "matmul",
    "add",
    "subtract",
    "elementwise-multiply",
    "elementwise-tanh",
    "elementwise-square",
    "elementwise-exp",
    "scalar-scale",
    "reduce-sum",
    "reduce-mean",
)


class TapeError(ValueError):
    """Misuse of a primitive (shape, payload) or a non-finite result."""


def as_tensor(value) -> np.ndarray:
    """Coerce to a C-contiguous float64 array (the only dtype the tape holds).

    Scalars stay 0-d: ascontiguousarray alone would promote them to shape
    (1,), which breaks the round trip between a parameter and its gradient.
    """
    arr = np.asarray(value, dtype=np.float64)
    return arr if arr.ndim == 0 else np.ascontiguousarray(arr, dtype=np.float64)


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    value: np.ndarray
    scale: float | None = None  # payload for scalar-scale
    trainable: bool = False
    needs_grad: bool = False  # True iff some trainable leaf is an ancestor


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, inverting numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tape:
    """Append-only record of a computation, walkable in reverse for gradients."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self._in_backward = False

    def __len__(self) -> int:
        return len(self.nodes)

    def value(self, nid: int) -> np.ndarray:
        return self.nodes[nid].value

    # -- recording ---------------------------------------------------------

    def record(self, op: str, inputs: tuple[int, ...] = (), payload=None,
               trainable: bool = False) -> int:
        """Append one node.  `payload` is the array for a leaf, the scalar for
        scalar-scale, and unused otherwise.  Returns the new node id."""
        if self._in_backward:
            raise TapeError("tape is frozen while backward() is running")
        if op not in OPS:
            raise TapeError(f"unknown op kind {op!r}")
        inputs = tuple(int(i) for i in inputs)
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise TapeError(f"input id {i} is not on the tape (len {len(self.nodes)})")
        vals = [self.nodes[i].value for i in inputs]

        # Overflow/invalid warnings are redundant here: any non-finite value
        # becomes a TapeError right below.
        with np.errstate(all="ignore"):
            out = self._apply(op, vals, payload)
        c = payload if op == "scalar-scale" else None
        out = as_tensor(out)
        # A full summation hits inf/nan with a single pass and no bool temp:
        # any non-finite entry leaves the total non-finite.
        if not np.isfinite(out.sum()):
            raise TapeError(f"non-finite result at node {len(self.nodes)} (op {op})")
        trainable = bool(trainable) if op == "leaf" else False
        needs = trainable or any(self.nodes[i].needs_grad for i in inputs)
        self.nodes.append(Node(op, inputs, out,
                               scale=float(c) if c is not None else None,
                               trainable=trainable, needs_grad=needs))
        return len(self.nodes) - 1

    def _apply(self, op: str, vals, payload) -> np.ndarray:
        if op == "leaf":
            if vals:
                raise TapeError("leaf takes no inputs")
            return as_tensor(payload)
        if op == "matmul":
            a, b = self._binary(op, vals)
            if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
                raise TapeError(f"matmul shapes do not conform: {a.shape} @ {b.shape}")
            out = a @ b
        elif op in ("add", "subtract", "elementwise-multiply"):
            a, b = self._binary(op, vals)
            try:
                np.broadcast_shapes(a.shape, b.shape)
            except ValueError:
                raise TapeError(f"{op} shapes do not broadcast: {a.shape} vs {b.shape}") from None
            if op == "add":
                out = a + b
            elif op == "subtract":
                out = a - b
            else:
                out = a * b
        elif op in ("elementwise-tanh", "elementwise-square", "elementwise-exp"):
            (a,) = self._unary(op, vals)
            out = {"elementwise-tanh": np.tanh,
                   "elementwise-square": np.square,
                   "elementwise-exp": np.exp}[op](a)
        elif op == "scalar-scale":
            (a,) = self._unary(op, vals)
            try:
                c = float(payload)
            except (TypeError, ValueError):
                raise TapeError(f"scalar-scale payload must be a real scalar, got {payload!r}") from None
            if not np.isfinite(c):
                raise TapeError(f"scalar-scale payload is non-finite: {c}")
            out = c * a
        elif op == "reduce-sum":
            (a,) = self._unary(op, vals)
            out = np.asarray(np.sum(a))
        else:  # reduce-mean
            (a,) = self._unary(op, vals)
            if a.size == 0:
                raise TapeError("reduce-mean of an empty tensor")
            out = np.asarray(np.mean(a))
        return out

    @staticmethod
    def _binary(op, vals):
        if len(vals) != 2:
            raise TapeError(f"{op} takes two inputs, got {len(vals)}")
        return vals

    @staticmethod
    def _unary(op, vals):
        if len(vals) != 1:
            raise TapeError(f"{op} takes one input, got {len(vals)}")
        return vals

    # Sugar.  All of these delegate to `record`.

    def leaf(self, value, trainable: bool = False) -> int:
        return self.record("leaf", (), value, trainable=trainable)

    def matmul(self, a: int, b: int) -> int:
        return self.record("matmul", (a, b))

    def add(self, a: int, b: int) -> int:
        return self.record("add", (a, b))

    def sub(self, a: int, b: int) -> int:
        return self.record("subtract", (a, b))

    def mul(self, a: int, b: int) -> int:
        return self.record("elementwise-multiply", (a, b))

    def tanh(self, a: int) -> int:
        return self.record("elementwise-tanh", (a,))

    def square(self, a: int) -> int:
        return self.record("elementwise-square", (a,))

    def exp(self, a: int) -> int:
        return self.record("elementwise-exp", (a,))

    def scale(self, a: int, c: float) -> int:
        return self.record("scalar-scale", (a,), c)

    def sum(self, a: int) -> int:
        return self.record("reduce-sum", (a,))

    def mean(self, a: int) -> int:
        return self.record("reduce-mean", (a,))

    # -- reverse pass ------------------------------------------------------

    def backward(self, root: int) -> dict[int, np.ndarray]:
        """Reverse-accumulate d(root)/d(leaf) for every trainable leaf.

        The root must be scalar-shaped.  Leaves the root does not depend on
        get explicit zero gradients.  Accumulation order is fixed by node
        index, so identical tapes give bit-identical results.
        """
        if not 0 <= root < len(self.nodes):
            raise TapeError(f"root id {root} is not on the tape")
        if self.nodes[root].value.size != 1:
            raise TapeError(
                f"backward root must be scalar-shaped, got shape {self.nodes[root].value.shape}")
        nodes = self.nodes
        grads: list[np.ndarray | None] = [None] * len(nodes)
        # owned[i] says grads[i] is a buffer backward allocated itself (safe to
        # add into in place); an unowned entry may alias a consumer's gradient.
        owned = bytearray(len(nodes))
        grads[root] = np.ones_like(nodes[root].value)
        owned[root] = 1
        self._in_backward = True
        try:
            for nid in range(root, -1, -1):
                g = grads[nid]
                if g is None:
                    continue
                node = self.nodes[nid]
                if node.op == "leaf":
                    continue
                for slot, contrib, fresh in self._vjp(node, g):
                    prev = grads[slot]
                    if prev is None:
                        grads[slot] = contrib
                        owned[slot] = fresh
                    elif owned[slot]:
                        np.add(prev, contrib, out=prev)
                    else:
                        grads[slot] = prev + contrib
                        owned[slot] = 1
        finally:
            self._in_backward = False
        out: dict[int, np.ndarray] = {}
        for i, node in enumerate(self.nodes):
            if node.trainable:
                g = grads[i]
                out[i] = np.zeros_like(node.value) if g is None else as_tensor(g)
        return out

    def _vjp(self, node: Node, g: np.ndarray):
        """Yield (input id, gradient contribution, freshly-allocated flag) for
        each input of `node` that has a trainable ancestor.  Inputs with no
        path back to a trainable leaf are skipped outright, which prunes whole
        constant subgraphs from the reverse walk."""
        op = node.op
        nodes = self.nodes
        want = tuple(nodes[i].needs_grad for i in node.inputs)
        vals = [nodes[i].value for i in node.inputs]
        if op == "matmul":
            a, b = vals
            if want[0]:
                yield node.inputs[0], g @ b.T, 1
            if want[1]:
                yield node.inputs[1], a.T @ g, 1
        elif op == "add":
            if want[0]:
                c = _unbroadcast(g, vals[0].shape)
                yield node.inputs[0], c, c is not g
            if want[1]:
                c = _unbroadcast(g, vals[1].shape)
                yield node.inputs[1], c, c is not g
        elif op == "subtract":
            if want[0]:
                c = _unbroadcast(g, vals[0].shape)
                yield node.inputs[0], c, c is not g
            if want[1]:
                yield node.inputs[1], _unbroadcast(-g, vals[1].shape), 1
        elif op == "elementwise-multiply":
            a, b = vals
            if want[0]:
                yield node.inputs[0], _unbroadcast(g * b, a.shape), 1
            if want[1]:
                yield node.inputs[1], _unbroadcast(g * a, b.shape), 1
        elif op == "elementwise-tanh":
            if want[0]:
                c = node.value * node.value
                np.subtract(1.0, c, out=c)
                c *= g
                yield node.inputs[0], c, 1
        elif op == "elementwise-square":
            if want[0]:
                c = g * vals[0]
                c *= 2.0
                yield node.inputs[0], c, 1
        elif op == "elementwise-exp":
            if want[0]:
                yield node.inputs[0], g * node.value, 1
        elif op == "scalar-scale":
            if want[0]:
                yield node.inputs[0], g * node.scale, 1
        elif op == "reduce-sum":
            if want[0]:
                yield node.inputs[0], np.full(vals[0].shape, float(g)), 1
        elif op == "reduce-mean":
            if want[0]:
                yield node.inputs[0], np.full(vals[0].shape, float(g) / vals[0].size), 1
