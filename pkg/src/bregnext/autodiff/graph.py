"""Static computation graph with reverse-mode gradient accumulation.

Nodes are wired once into a DAG; `evaluate` runs a topological forward
pass and `backward` accumulates gradients from a scalar loss back to
every reachable node and trainable parameter.
"""

from __future__ import annotations

import itertools

import numpy as np


class GraphError(Exception):
    """Structural misuse of the graph (cycles, backward before forward)."""


class ShapeError(GraphError):
    """Shape mismatch, reported with the offending node's name."""


class NonFiniteError(ArithmeticError):
    """A node produced NaN/Inf while finite checking was enabled."""

    def __init__(self, node_name: str):
        super().__init__(f"non-finite value produced by node '{node_name}'")
        self.node_name = node_name


# Global switches.  `deterministic` pins reduction order in kernels that
# would otherwise be free to reorder; `check_finite` validates every node
# output during evaluate.
_FLAGS = {"deterministic": True, "check_finite": False}


def set_deterministic(on: bool) -> None:
    _FLAGS["deterministic"] = bool(on)


def deterministic() -> bool:
    return _FLAGS["deterministic"]


def set_check_finite(on: bool) -> None:
    _FLAGS["check_finite"] = bool(on)


_node_ids = itertools.count()


def _shapes_compatible(static, concrete) -> bool:
    if len(static) != len(concrete):
        return False
    return all(s is None or s == c for s, c in zip(static, concrete))


class Node:
    """One operation instance.  Subclasses implement `compute` and
    `input_grads`; `shape` is static (None marks the free batch dim)."""

    def __init__(self, inputs=(), name: str | None = None):
        self.inputs: list[Node] = list(inputs)
        self.name = name or f"{type(self).__name__.lower()}/{next(_node_ids)}"
        self.value: np.ndarray | None = None
        self.grad: np.ndarray | None = None
        self.shape: tuple = ()

    def compute(self, feeds: dict, training: bool) -> np.ndarray:
        raise NotImplementedError

    def input_grads(self, grad: np.ndarray, training: bool):
        """Gradients w.r.t. each input, aligned with self.inputs.
        Entries may be None for non-differentiable inputs."""
        raise NotImplementedError

    def __repr__(self):
        return f"<{type(self).__name__} {self.name} shape={self.shape}>"


class Placeholder(Node):
    def __init__(self, name: str, shape, dtype=np.float32):
        super().__init__((), name)
        self.shape = tuple(shape)
        self.dtype = np.dtype(dtype)

    def compute(self, feeds, training):
        if self.name not in feeds:
            raise GraphError(f"no feed supplied for placeholder '{self.name}'")
        value = np.asarray(feeds[self.name], dtype=self.dtype)
        if not _shapes_compatible(self.shape, value.shape):
            raise ShapeError(
                f"feed for '{self.name}' has shape {value.shape}, "
                f"declared {self.shape}"
            )
        return value

    def input_grads(self, grad, training):
        return []


class IntPlaceholder(Node):
    """Feed of integer indices (labels); never differentiated."""

    def __init__(self, name: str, shape):
        super().__init__((), name)
        self.shape = tuple(shape)

    def compute(self, feeds, training):
        if self.name not in feeds:
            raise GraphError(f"no feed supplied for placeholder '{self.name}'")
        value = np.asarray(feeds[self.name])
        if not np.issubdtype(value.dtype, np.integer):
            raise ShapeError(f"feed for '{self.name}' must be integer-typed")
        if not _shapes_compatible(self.shape, value.shape):
            raise ShapeError(
                f"feed for '{self.name}' has shape {value.shape}, "
                f"declared {self.shape}"
            )
        return value

    def input_grads(self, grad, training):
        return []


class ParamEntry:
    """One named trainable (or stateful) tensor."""

    __slots__ = ("name", "value", "grad", "trainable", "weight_decay",
                 "clamp_min_abs")

    def __init__(self, name, value, trainable=True, weight_decay=False,
                 clamp_min_abs=None):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)
        self.trainable = trainable
        self.weight_decay = weight_decay
        self.clamp_min_abs = clamp_min_abs

    def __repr__(self):
        return (f"ParamEntry({self.name!r}, shape={self.value.shape}, "
                f"trainable={self.trainable})")


class ParamStore:
    """Named map of parameter tensors and their gradients."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._entries: dict[str, ParamEntry] = {}
        self.grads_populated = False

    def add(self, name, value, trainable=True, weight_decay=False,
            clamp_min_abs=None) -> ParamEntry:
        if name in self._entries:
            raise GraphError(f"duplicate parameter name '{name}'")
        value = np.array(value, dtype=self.dtype)
        entry = ParamEntry(name, value, trainable, weight_decay, clamp_min_abs)
        self._entries[name] = entry
        return entry

    def __getitem__(self, name) -> ParamEntry:
        return self._entries[name]

    def __contains__(self, name) -> bool:
        return name in self._entries

    def __iter__(self):
        return iter(self._entries.values())

    def __len__(self):
        return len(self._entries)

    def names(self):
        return list(self._entries)

    def trainable_entries(self):
        return [e for e in self._entries.values() if e.trainable]

    def zero_grad(self) -> None:
        self.grads_populated = False
        for entry in self._entries.values():
            entry.grad[...] = 0


class Parameter(Node):
    """Graph node backed by a ParamStore entry."""

    def __init__(self, entry: ParamEntry):
        super().__init__((), f"param/{entry.name}")
        self.entry = entry
        self.shape = entry.value.shape

    def compute(self, feeds, training):
        return self.entry.value

    def input_grads(self, grad, training):
        return []


class Constant(Node):
    def __init__(self, value, dtype=np.float32, name=None):
        super().__init__((), name)
        self.value_const = np.asarray(value, dtype=dtype)
        self.shape = self.value_const.shape

    def compute(self, feeds, training):
        return self.value_const

    def input_grads(self, grad, training):
        return []


def topo_order(outputs) -> list[Node]:
    """Total topological order of the subgraph feeding `outputs`.
    Raises GraphError on cycles."""
    order: list[Node] = []
    state: dict[int, int] = {}  # 0 visiting, 1 done
    result_set = set()
    for root in outputs:
        if state.get(id(root)) == 1:
            continue
        stack = [(root, iter(root.inputs))]
        state[id(root)] = 0
        while stack:
            node, it = stack[-1]
            advanced = False
            for child in it:
                s = state.get(id(child))
                if s == 0:
                    raise GraphError(f"cycle detected at node '{child.name}'")
                if s is None:
                    state[id(child)] = 0
                    stack.append((child, iter(child.inputs)))
                    advanced = True
                    break
            if not advanced:
                stack.pop()
                state[id(node)] = 1
                if id(node) not in result_set:
                    order.append(node)
                    result_set.add(id(node))
    return order


def evaluate(outputs, feeds=None, training=False, check_finite=None):
    """Forward pass.  Returns {node.name: value} for the requested outputs.

    Deterministic: identical feeds and parameters give bitwise-identical
    results in deterministic mode (single sequential evaluation order).
    """
    if isinstance(outputs, Node):
        outputs = [outputs]
    feeds = feeds or {}
    if check_finite is None:
        check_finite = _FLAGS["check_finite"]
    for node in topo_order(outputs):
        node.value = node.compute(feeds, training)
        if check_finite and not np.all(np.isfinite(node.value)):
            raise NonFiniteError(node.name)
    return {node.name: node.value for node in outputs}


def backward(loss: Node, store: ParamStore | None = None,
             training: bool = True) -> None:
    """Reverse-mode accumulation of d(loss)/d(node) for every node that
    feeds `loss`.  Parameter gradients are added into their store entries.
    """
    if loss.value is None:
        raise GraphError("backward called before forward (loss has no value)")
    if np.asarray(loss.value).ndim != 0 and np.asarray(loss.value).size != 1:
        raise GraphError(f"loss node '{loss.name}' is not scalar")

    order = topo_order([loss])
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.value)

    for node in reversed(order):
        if node.grad is None or not node.inputs:
            continue
        grads = node.input_grads(node.grad, training)
        for inp, g in zip(node.inputs, grads):
            if g is None:
                continue
            if inp.grad is None:
                inp.grad = np.array(g, copy=True)
            else:
                inp.grad += g

    if store is not None:
        store.grads_populated = True
    for node in order:
        if isinstance(node, Parameter) and node.grad is not None:
            if node.entry.grad.shape != node.grad.shape:
                raise ShapeError(
                    f"gradient shape {node.grad.shape} does not match "
                    f"parameter '{node.entry.name}' shape {node.entry.grad.shape}"
                )
            node.entry.grad += node.grad
