"""Dense 2-D reverse-mode automatic differentiation on float64 numpy arrays.

A :class:`Tape` records every operation in execution order.  Calling
:meth:`Tape.backward` on a scalar node walks the tape in reverse and
accumulates gradients into the :class:`Parameter` leaves that were used.

>>> tape = Tape()
>>> w = Parameter("w", np.array([[2.0]]))
>>> loss = tape.mse(tape.matmul(tape.param(w), tape.const([[3.0]])), tape.const([[0.0]]))
>>> tape.backward(loss)
>>> float(w.grad[0, 0])
36.0
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

__all__ = [
    "ShapeError",
    "NonFiniteError",
    "Parameter",
    "Node",
    "Tape",
    "GradCheckResult",
    "grad_check",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_MAGIC",
]

BCE_EPS = 1e-12


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or infinity."""


def _as_matrix(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {arr.shape}")
    return arr


@dataclass(eq=False)
class Parameter:
    """A named matrix with an accumulated gradient.

    Frozen (non-trainable) parameters never accumulate gradients.
    """

    name: str
    value: np.ndarray
    trainable: bool = True
    grad: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.value = _as_matrix(self.value)
        if not np.all(np.isfinite(self.value)):
            raise NonFiniteError(f"parameter {self.name!r} has non-finite entries")
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape  # type: ignore[return-value]

    @property
    def size(self) -> int:
        return int(self.value.size)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)


@dataclass(eq=False)
class Node:
    index: int
    op: str
    inputs: tuple[int, ...]
    value: np.ndarray
    cache: object = None
    param: Parameter | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape  # type: ignore[return-value]


class Tape:
    """Records forward ops so gradients can be replayed in reverse."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self._param_nodes: dict[int, Node] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def _push(self, op: str, inputs: tuple[Node, ...], value: np.ndarray, cache=None, param=None) -> Node:
        # the sum is finite iff every element is, barring overflow, which the full check settles
        if not math.isfinite(value.sum()) and not np.all(np.isfinite(value)):
            raise NonFiniteError(f"{op} produced a non-finite value")
        for n in inputs:
            if n.index >= len(self.nodes) or self.nodes[n.index] is not n:
                raise ValueError(f"{op}: input node does not belong to this tape")
        node = Node(len(self.nodes), op, tuple(n.index for n in inputs), value, cache, param)
        self.nodes.append(node)
        return node

    # leaves

    def const(self, value) -> Node:
        return self._push("const", (), _as_matrix(value))

    def param(self, p: Parameter) -> Node:
        node = self._param_nodes.get(id(p))
        if node is None:
            node = self._push("param", (), p.value, param=p)
            self._param_nodes[id(p)] = node
        return node

    # ops

    def matmul(self, a: Node, b: Node) -> Node:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
        return self._push("matmul", (a, b), a.value @ b.value)

    def add(self, a: Node, b: Node) -> Node:
        """Elementwise sum; ``b`` may be a 1-row matrix broadcast over rows."""
        if a.shape == b.shape:
            return self._push("add", (a, b), a.value + b.value, cache=False)
        if b.shape[0] == 1 and b.shape[1] == a.shape[1]:
            return self._push("add", (a, b), a.value + b.value, cache=True)
        raise ShapeError(f"add: {a.shape} + {b.shape}")

    def hadamard(self, a: Node, b: Node) -> Node:
        if a.shape != b.shape:
            raise ShapeError(f"hadamard: {a.shape} * {b.shape}")
        return self._push("hadamard", (a, b), a.value * b.value)

    def scale(self, a: Node, k: float) -> Node:
        k = float(k)
        return self._push("scale", (a,), a.value * k, cache=k)

    def relu(self, a: Node) -> Node:
        mask = a.value > 0
        return self._push("relu", (a,), np.where(mask, a.value, 0.0), cache=mask)

    def sigmoid(self, a: Node) -> Node:
        x = a.value
        # split by sign so exp never overflows
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return self._push("sigmoid", (a,), out)

    def row_softmax(self, a: Node) -> Node:
        z = a.value - a.value.max(axis=1, keepdims=True)
        e = np.exp(z)
        return self._push("row_softmax", (a,), e / e.sum(axis=1, keepdims=True))

    def transpose(self, a: Node) -> Node:
        return self._push("transpose", (a,), a.value.T.copy())

    def mse(self, a: Node, b: Node) -> Node:
        if a.shape != b.shape:
            raise ShapeError(f"mse: {a.shape} vs {b.shape}")
        diff = a.value - b.value
        return self._push("mse", (a, b), np.array([[np.mean(diff * diff)]]), cache=diff)

    def bce(self, p: Node, t: Node) -> Node:
        """Mean binary cross-entropy of probabilities ``p`` against targets ``t``."""
        if p.shape != t.shape:
            raise ShapeError(f"bce: {p.shape} vs {t.shape}")
        pc = np.clip(p.value, BCE_EPS, 1.0 - BCE_EPS)
        tv = t.value
        val = -np.mean(tv * np.log(pc) + (1.0 - tv) * np.log1p(-pc))
        return self._push("bce", (p, t), np.array([[val]]), cache=pc)

    # reverse pass

    def backward(self, loss: Node) -> None:
        if not self.nodes:
            raise RuntimeError("backward called before any forward op was recorded")
        if loss.index >= len(self.nodes) or self.nodes[loss.index] is not loss:
            raise RuntimeError("loss node is not on this tape")
        if loss.shape != (1, 1):
            raise ShapeError(f"backward needs a scalar loss, got {loss.shape}")

        grads: list[np.ndarray | None] = [None] * (loss.index + 1)
        grads[loss.index] = np.ones((1, 1))

        def acc(i: int, g: np.ndarray) -> None:
            cur = grads[i]
            grads[i] = g if cur is None else cur + g

        nodes = self.nodes
        for node in reversed(nodes[: loss.index + 1]):
            g = grads[node.index]
            if g is None:
                continue
            op = node.op
            if op == "param":
                if node.param.trainable:
                    node.param.grad += g
                continue
            if op == "const":
                continue
            ins = node.inputs
            if op == "matmul":
                a, b = nodes[ins[0]].value, nodes[ins[1]].value
                acc(ins[0], g @ b.T)
                acc(ins[1], a.T @ g)
            elif op == "add":
                acc(ins[0], g)
                acc(ins[1], g.sum(axis=0, keepdims=True) if node.cache else g)
            elif op == "hadamard":
                acc(ins[0], g * nodes[ins[1]].value)
                acc(ins[1], g * nodes[ins[0]].value)
            elif op == "scale":
                acc(ins[0], g * node.cache)
            elif op == "relu":
                acc(ins[0], g * node.cache)
            elif op == "sigmoid":
                y = node.value
                acc(ins[0], g * y * (1.0 - y))
            elif op == "row_softmax":
                y = node.value
                acc(ins[0], y * (g - np.sum(g * y, axis=1, keepdims=True)))
            elif op == "transpose":
                acc(ins[0], g.T)
            elif op == "mse":
                diff = node.cache
                d = g[0, 0] * 2.0 * diff / diff.size
                acc(ins[0], d)
                acc(ins[1], -d)
            elif op == "bce":
                pc = node.cache
                tv = nodes[ins[1]].value
                n = pc.size
                acc(ins[0], g[0, 0] * (pc - tv) / (pc * (1.0 - pc)) / n)
                acc(ins[1], g[0, 0] * -(np.log(pc) - np.log1p(-pc)) / n)
            else:  # pragma: no cover
                raise RuntimeError(f"no backward rule for {op}")

    def relu_patterns(self) -> list[np.ndarray]:
        return [n.cache for n in self.nodes if n.op == "relu"]


@dataclass
class GradCheckResult:
    name: str
    max_rel_err: float
    checked: int
    excluded: int

    def passed(self, tol: float) -> bool:
        return self.max_rel_err < tol


def _rel_err(analytic: float, numeric: float, floor: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(
    forward: Callable[[Tape], Node],
    params: Iterable[Parameter],
    eps: float = 1e-4,
    tol: float = 1e-4,
    floor: float = 1e-6,
) -> dict[str, GradCheckResult]:
    """Compare analytic gradients with central differences, element by element.

    ``forward`` builds a scalar loss on the tape it is given.  Relative error is
    ``|a - n| / max(|a|, |n|, floor)``.  An element is excluded (not failed)
    when perturbing it by ``±eps`` flips any ReLU on/off pattern, since the
    finite difference then straddles a kink.  ``tol`` only decorates the
    results; callers decide with :meth:`GradCheckResult.passed`.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = list(params)
    frozen = [p.name for p in params if not p.trainable]
    if frozen:
        raise ValueError(f"cannot grad-check frozen parameters: {frozen}")
    for p in params:
        p.zero_grad()
    tape = Tape()
    loss = forward(tape)
    tape.backward(loss)
    base_patterns = tape.relu_patterns()

    def evaluate() -> tuple[float, list[np.ndarray]]:
        t = Tape()
        out = forward(t)
        return float(out.value[0, 0]), t.relu_patterns()

    def same_pattern(pats: list[np.ndarray]) -> bool:
        return len(pats) == len(base_patterns) and all(
            np.array_equal(a, b) for a, b in zip(pats, base_patterns)
        )

    results: dict[str, GradCheckResult] = {}
    for p in params:
        analytic = p.grad.copy()
        worst, checked, excluded = 0.0, 0, 0
        flat = p.value.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            f_plus, pats_plus = evaluate()
            flat[k] = orig - eps
            f_minus, pats_minus = evaluate()
            flat[k] = orig
            if not (same_pattern(pats_plus) and same_pattern(pats_minus)):
                excluded += 1
                continue
            numeric = (f_plus - f_minus) / (2.0 * eps)
            worst = max(worst, _rel_err(float(analytic.reshape(-1)[k]), numeric, floor))
            checked += 1
        results[p.name] = GradCheckResult(p.name, worst, checked, excluded)
    return results


# checkpoint format: magic(4) | version u32 | count u32 | records
# record: name_len u32 | name utf-8 | rows u32 | cols u32 | rows*cols float64 LE

CHECKPOINT_MAGIC = b"TCK1"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray], magic: bytes = CHECKPOINT_MAGIC) -> None:
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    chunks = [magic, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = _as_matrix(value)
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<II", *arr.shape))
        chunks.append(arr.astype("<f8").tobytes(order="C"))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def load_checkpoint(path: str | Path, magic: bytes = CHECKPOINT_MAGIC) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != magic:
        raise ValueError(f"{path}: bad magic {data[:4]!r}, expected {magic!r}")
    version, count = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off : off + nlen].decode("utf-8")
        off += nlen
        rows, cols = struct.unpack_from("<II", data, off)
        off += 8
        nbytes = rows * cols * 8
        arr = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=off).reshape(rows, cols)
        out[name] = arr.astype(np.float64)
        off += nbytes
    if off != len(data):
        raise ValueError(f"{path}: {len(data) - off} trailing bytes")
    return out
