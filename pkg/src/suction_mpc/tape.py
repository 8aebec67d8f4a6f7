"""A small reverse-mode tape over vectorised operations.

Each node stores the forward value of one vectorised sub-step together with
whatever the hand-written vector-Jacobian product needs. ``record`` lets the
same simulation code run with or without a tape: without one it just calls
the forward function, so taped and untaped runs perform identical arithmetic.
"""
import numpy as np


class TapeError(RuntimeError):
    pass


class TapeMemoryError(TapeError):
    pass


DEFAULT_MEMORY_CAP = 1 << 30  # bytes


class Node:
    __slots__ = ("index", "kind", "inputs", "value", "cache", "fwd", "vjp")

    def __init__(self, index, kind, inputs, value, cache=None, fwd=None, vjp=None):
        self.index = index
        self.kind = kind
        self.inputs = inputs
        self.value = value
        self.cache = cache
        self.fwd = fwd
        self.vjp = vjp

    def __repr__(self):
        return f"Node({self.index}, {self.kind!r})"


def _nbytes(obj):
    if isinstance(obj, np.ndarray):
        return obj.nbytes
    if isinstance(obj, (tuple, list)):
        return sum(_nbytes(o) for o in obj)
    return 8


class Tape:
    """Topologically ordered list of nodes recorded during one rollout."""

    def __init__(self, memory_cap=DEFAULT_MEMORY_CAP):
        self.nodes = []
        self.memory_cap = memory_cap
        self.nbytes = 0
        self.controls = []  # leaf nodes, one per control step
        self.states = []  # (positions node, active mask) after every step

    def __len__(self):
        return len(self.nodes)

    def _push(self, node):
        self.nbytes += _nbytes(node.value) + _nbytes(node.cache)
        if self.memory_cap is not None and self.nbytes > self.memory_cap:
            raise TapeMemoryError(
                f"tape uses {self.nbytes} bytes, above the cap of {self.memory_cap}; "
                "shorten the horizon or raise memory_cap")
        self.nodes.append(node)
        return node

    def leaf(self, kind, value):
        return self._push(Node(len(self.nodes), kind, (), value))

    def op(self, kind, fwd, vjp, *inputs):
        for n in inputs:
            if n.index >= len(self.nodes) or self.nodes[n.index] is not n:
                raise TapeError(f"input {n!r} of {kind!r} is not on this tape")
        value, cache = fwd(*(n.value for n in inputs))
        return self._push(Node(len(self.nodes), kind, tuple(inputs), value, cache, fwd, vjp))

    def owns(self, node):
        return isinstance(node, Node) and node.index < len(self.nodes) and self.nodes[node.index] is node

    def replay(self):
        """Recompute every op from its recorded inputs; True when all outputs match bitwise."""
        for node in self.nodes:
            if node.fwd is None:
                continue
            value, _ = node.fwd(*(n.value for n in node.inputs))
            if not _bitwise_equal(value, node.value):
                return False
        return True

    def backward(self, output, seed=1.0):
        """Reverse sweep from ``output``; returns the adjoint list indexed like ``nodes``."""
        if not self.owns(output):
            raise TapeError("loss node is not on this tape")
        adj = [None] * (output.index + 1)
        adj[output.index] = seed
        for k in range(output.index, -1, -1):
            g = adj[k]
            if g is None:
                continue
            node = self.nodes[k]
            if node.vjp is None:
                continue
            bars = node.vjp(g, node.cache, *(n.value for n in node.inputs))
            for inp, bar in zip(node.inputs, bars):
                if bar is None:
                    continue
                cur = adj[inp.index]
                adj[inp.index] = bar if cur is None else cur + bar
        return adj

    # -- small algebra on scalar nodes, used for composite losses ------------
    def add(self, a, b):
        return self.op("add", lambda x, y: (x + y, None), lambda g, c, x, y: (g, g), a, b)

    def scale(self, a, factor):
        factor = float(factor)
        return self.op("scale", lambda x: (factor * x, None), lambda g, c, x: (factor * g,), a)

    def total(self, nodes):
        acc = nodes[0]
        for n in nodes[1:]:
            acc = self.add(acc, n)
        return acc


def _bitwise_equal(a, b):
    if isinstance(a, tuple):
        return isinstance(b, tuple) and len(a) == len(b) and all(_bitwise_equal(x, y) for x, y in zip(a, b))
    a = np.asarray(a)
    b = np.asarray(b)
    return a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()


def record(tape, kind, fwd, vjp, *inputs):
    """Run ``fwd`` directly (no tape) or record it as a node."""
    if tape is None:
        return fwd(*inputs)[0]
    return tape.op(kind, fwd, vjp, *inputs)


def value(handle):
    return handle.value if isinstance(handle, Node) else handle
