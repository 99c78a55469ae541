"""Minimal reverse-mode autodiff over dense float64 arrays.

Every value in a graph is a :class:`Node` wrapping a numpy ``float64`` array.
Operations are a fixed set of primitives, each with an exact analytic adjoint.
Graphs are rebuilt on every forward pass (define-by-run) and reduced by
:func:`backward` in reverse topological order.

Broadcasting is limited to what the models need: ``add`` and ``mul`` accept a
1-D right operand against a 2-D left operand (row broadcast, e.g. biases).
"""

from __future__ import annotations

import contextlib
import json
import struct
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Node",
    "ContractError",
    "NumericError",
    "param",
    "const",
    "no_grad",
    "matmul",
    "add",
    "sub",
    "mul",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "clip",
    "concat",
    "slice_",
    "sum_",
    "mean",
    "square",
    "scale",
    "backward",
    "finite_diff_check",
    "finite_diff_params",
    "save_checkpoint",
    "load_checkpoint",
]


class ContractError(ValueError):
    """A precondition of an operation was violated (shapes, lengths, ranges)."""


class NumericError(ArithmeticError):
    """A non-finite value showed up where finite values are required."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Build constant nodes only; nothing inside is recorded for backward."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Node:
    __slots__ = ("value", "op", "parents", "grad", "requires_grad", "_backward", "name")

    def __init__(self, value, op="leaf", parents=(), backward_fn=None, requires_grad=False, name=None):
        self.value = value
        self.op = op
        self.parents = parents
        self._backward = backward_fn
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def is_param(self) -> bool:
        return self.requires_grad and not self.parents

    def __repr__(self) -> str:
        tag = self.name or self.op
        return f"Node({tag}, shape={self.value.shape})"

    # sugar used by the model code; each maps to exactly one primitive
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _lift(other))


def _as_array(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    return arr


def param(x, name: str | None = None) -> Node:
    """A trainable leaf. Gradients are accumulated into ``.grad``."""
    return Node(np.array(_as_array(x), dtype=np.float64), requires_grad=True, name=name)


def const(x) -> Node:
    return Node(_as_array(x))


def _lift(x) -> Node:
    return x if isinstance(x, Node) else const(x)


def _make(value, op, parents, backward_fn) -> Node:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Node(value, op, parents, backward_fn, requires_grad=True)
    return Node(value, op)


def make_op(value: np.ndarray, op: str, parents: tuple[Node, ...], backward_fn) -> Node:
    """Register a fused operation defined outside this module.

    ``backward_fn(g)`` must return one adjoint per parent, each shaped like
    that parent's value.
    """
    return _make(value, op, tuple(parents), backward_fn)


# ---------------------------------------------------------------- primitives


def matmul(a: Node, b: Node, transpose_b: bool = False) -> Node:
    """``a @ b`` (or ``a @ b.T``) for 2-D operands."""
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2:
        raise ContractError(f"matmul expects 2-D operands, got {av.shape} and {bv.shape}")
    inner = bv.shape[1] if transpose_b else bv.shape[0]
    if av.shape[1] != inner:
        raise ContractError(f"matmul shape mismatch: {av.shape} x {bv.shape} (transpose_b={transpose_b})")
    out = av @ (bv.T if transpose_b else bv)

    def bw(g):
        ga = g @ bv if transpose_b else g @ bv.T
        gb = g.T @ av if transpose_b else av.T @ g
        return ga, gb

    return _make(out, "matmul", (a, b), bw)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    # only row broadcast of a 1-D operand is supported
    return g.sum(axis=0)


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape == b.shape:
        return
    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        return
    if b.ndim == 2 and a.ndim == 1 and b.shape[1] == a.shape[0]:
        return
    raise ContractError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def add(a: Node, b: Node) -> Node:
    av, bv = a.value, b.value
    _check_broadcast("add", av, bv)
    sa, sb = av.shape, bv.shape
    return _make(av + bv, "add", (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Node, b: Node) -> Node:
    """``a + scale(b, -1)`` fused into one node to keep graphs small."""
    av, bv = a.value, b.value
    _check_broadcast("sub", av, bv)
    sa, sb = av.shape, bv.shape
    return _make(av - bv, "sub", (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a: Node, b: Node) -> Node:
    av, bv = a.value, b.value
    _check_broadcast("mul", av, bv)
    sa, sb = av.shape, bv.shape
    return _make(av * bv, "mul", (a, b), lambda g: (_unbroadcast(g * bv, sa), _unbroadcast(g * av, sb)))


def sigmoid_values(x: np.ndarray) -> np.ndarray:
    """Logistic function; exp(-|x|) never overflows and keeps relative
    precision on both tails."""
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0, e) / (1.0 + e)


def sigmoid(a: Node) -> Node:
    out = sigmoid_values(a.value)
    return _make(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Node) -> Node:
    out = np.tanh(a.value)
    return _make(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def exp(a: Node) -> Node:
    out = np.exp(a.value)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def log(a: Node) -> Node:
    x = a.value
    if np.any(x <= 0.0):
        raise NumericError("log: non-positive input")
    return _make(np.log(x), "log", (a,), lambda g: (g / x,))


def clip(a: Node, lo: float, hi: float) -> Node:
    """Clamp to ``[lo, hi]``; the adjoint is zero where the clamp is active."""
    x = a.value
    out = np.clip(x, lo, hi)
    inside = (x >= lo) & (x <= hi)
    return _make(out, "clip", (a,), lambda g: (g * inside,))


def concat(nodes: Sequence[Node], axis: int = -1) -> Node:
    nodes = list(nodes)
    if not nodes:
        raise ContractError("concat of an empty sequence")
    vals = [n.value for n in nodes]
    try:
        out = np.concatenate(vals, axis=axis)
    except ValueError as exc:
        raise ContractError(f"concat: {exc}") from None
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, "concat", tuple(nodes), bw)


def slice_(a: Node, start: int, stop: int, axis: int = -1) -> Node:
    """Contiguous slice ``[start:stop]`` along one axis."""
    x = a.value
    if not 0 <= start < stop <= x.shape[axis]:
        raise ContractError(f"slice [{start}:{stop}] out of range for axis of size {x.shape[axis]}")
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return _make(x[idx], "slice", (a,), bw)


def sum_(a: Node) -> Node:
    shape = a.value.shape
    return _make(np.array([a.value.sum()]), "sum", (a,), lambda g: (np.full(shape, g[0]),))


def mean(a: Node) -> Node:
    shape = a.value.shape
    n = a.value.size
    return _make(np.array([a.value.mean()]), "mean", (a,), lambda g: (np.full(shape, g[0] / n),))


def square(a: Node) -> Node:
    x = a.value
    return _make(x * x, "square", (a,), lambda g: (2.0 * g * x,))


def scale(a: Node, c: float) -> Node:
    c = float(c)
    return _make(a.value * c, "scale", (a,), lambda g: (g * c,))


# ---------------------------------------------------------------- backward


def _topo_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Node) -> dict[Node, np.ndarray]:
    """Accumulate d(loss)/d(param) into every reachable parameter's ``.grad``.

    Returns a mapping from parameter node to its gradient. Intermediate
    gradients are released once the pass completes.
    """
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    if not np.isfinite(loss.value).all():
        raise NumericError(f"loss is non-finite (produced by op '{loss.op}')")
    if not loss.requires_grad:
        return {}
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    result: dict[Node, np.ndarray] = {}
    # overflow is reported below as a NumericError naming the op
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node.parents:
                node.grad = g if node.grad is None else node.grad + g
                result[node] = node.grad
                continue
            for p, pg in zip(node.parents, node._backward(g)):
                if not p.requires_grad:
                    continue
                key = id(p)
                prev = grads.get(key)
                grads[key] = pg if prev is None else prev + pg
    for node, g in result.items():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient first produced by op '{_first_bad_op(loss, order)}'")
    return result


def _first_bad_op(loss: Node, order: list[Node]) -> str:
    # replay the pass, checking each adjoint as it is produced
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None or not node.parents:
            continue
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            pgrads = node._backward(g)
        for p, pg in zip(node.parents, pgrads):
            if not p.requires_grad:
                continue
            if not np.isfinite(pg).all():
                return node.op
            grads[id(p)] = pg if id(p) not in grads else grads[id(p)] + pg
    return "unknown"


def zero_grad(params: Iterable[Node]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------- gradient check


def finite_diff_check(
    f: Callable[[Node], Node], x: np.ndarray, eps: float = 1e-5, return_grads: bool = False
):
    """Max relative error between the analytic gradient of ``f`` at ``x`` and
    central differences, ``|g_a - g_fd| / max(1e-8, |g_fd|)``.

    ``f`` maps a parameter node to a scalar node.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    x = np.array(x, dtype=np.float64)
    p = param(x)
    out = f(p)
    if not np.isfinite(out.value).all():
        raise NumericError("f is non-finite at x")
    backward(out)
    analytic = np.zeros_like(x) if p.grad is None else p.grad.copy()

    numeric = np.zeros_like(x)
    flat = x.reshape(-1)
    nflat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(const(x)).value
            flat[i] = orig - eps
            fm = f(const(x)).value
            flat[i] = orig
            if not (np.isfinite(fp).all() and np.isfinite(fm).all()):
                raise NumericError(f"f is non-finite near coordinate {i}")
            nflat[i] = (fp.item() - fm.item()) / (2.0 * eps)
    err = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(numeric))
    max_err = float(err.max()) if err.size else 0.0
    if return_grads:
        return max_err, analytic, numeric
    return max_err


def finite_diff_params(
    loss_fn: Callable[[], Node], params: Sequence[Node], eps: float = 1e-5, return_grads: bool = False
):
    """Like :func:`finite_diff_check` but for parameters already wired into a
    model: ``loss_fn()`` rebuilds the graph from the current parameter values,
    which are perturbed in place and restored afterwards.

    With ``return_grads`` also returns the flattened analytic and numeric
    gradients over all parameters."""
    if eps <= 0:
        raise ContractError("eps must be positive")
    zero_grad(params)
    grads = backward(loss_fn())
    worst = 0.0
    all_a, all_n = [], []
    for p in params:
        analytic = grads.get(p, np.zeros_like(p.value))
        flat = p.value.reshape(-1)
        numeric = np.zeros(flat.size)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = loss_fn().value.item()
                flat[i] = orig - eps
                fm = loss_fn().value.item()
                flat[i] = orig
                numeric[i] = (fp - fm) / (2.0 * eps)
        err = np.abs(analytic.reshape(-1) - numeric) / np.maximum(1e-8, np.abs(numeric))
        if err.size:
            worst = max(worst, float(err.max()))
        all_a.append(analytic.reshape(-1))
        all_n.append(numeric)
    zero_grad(params)
    if return_grads:
        return worst, np.concatenate(all_a), np.concatenate(all_n)
    return worst


# ---------------------------------------------------------------- checkpoints

_MAGIC = b"EGOCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: Mapping[str, Node | np.ndarray], meta: dict | None = None) -> None:
    """Write named arrays as a JSON header followed by little-endian float64 data.

    The layout is fully determined by the inputs, so equal weights give
    byte-identical files.
    """
    entries = []
    blobs = []
    offset = 0
    for name in sorted(params):
        v = params[name]
        arr = np.ascontiguousarray(v.value if isinstance(v, Node) else v, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps(
        {"version": CHECKPOINT_VERSION, "meta": meta or {}, "tensors": entries}, sort_keys=True
    ).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<BQ", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if not data.startswith(_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    pos = len(_MAGIC)
    version, hlen = struct.unpack_from("<BQ", data, pos)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    pos += struct.calcsize("<BQ")
    header = json.loads(data[pos : pos + hlen])
    base = pos + hlen
    out = {}
    for e in header["tensors"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        start = base + e["offset"]
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=start).reshape(e["shape"])
        out[e["name"]] = arr.astype(np.float64)
    return out, header["meta"]
