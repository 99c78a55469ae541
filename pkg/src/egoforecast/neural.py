"""GRU cell, MLP and inverted dropout composed from ``ndtensor`` primitives.

All layers work on row batches: an input of shape ``(B, D)`` yields ``(B, out)``.
1-D inputs are treated as a batch of one and returned as ``(1, out)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, is_dataclass
from typing import Iterator, Sequence

import numpy as np

from . import ndtensor as nd
from .ndtensor import ContractError, Node

ACTIVATIONS = ("tanh", "identity")
DROPOUT_MODES = ("train", "mc-sample", "off")


@dataclass
class GruWeights:
    """Gate order along the first axis is update ``z``, reset ``r``, candidate ``n``."""

    w_ih: Node  # (3H, D)
    w_hh: Node  # (3H, H)
    bias: Node  # (3H,)

    def __post_init__(self):
        three_h, h = self.w_hh.shape
        if three_h != 3 * h or self.w_ih.shape[0] != three_h or self.bias.shape != (three_h,):
            raise ContractError(
                f"inconsistent GRU shapes: w_ih {self.w_ih.shape}, w_hh {self.w_hh.shape}, bias {self.bias.shape}"
            )

    @property
    def hidden_size(self) -> int:
        return self.w_hh.shape[1]

    @property
    def input_size(self) -> int:
        return self.w_ih.shape[1]


@dataclass
class Layer:
    weight: Node  # (out, in)
    bias: Node  # (out,)
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ContractError(f"bias {self.bias.shape} does not match weight {self.weight.shape}")


@dataclass
class MlpWeights:
    layers: list[Layer] = field(default_factory=list)

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if a.weight.shape[0] != b.weight.shape[1]:
                raise ContractError(f"MLP layers do not chain: {a.weight.shape} -> {b.weight.shape}")

    @property
    def out_size(self) -> int:
        return self.layers[-1].weight.shape[0]


@dataclass(frozen=True)
class DropoutSpec:
    rate: float = 0.0
    mode: str = "off"

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ContractError(f"dropout rate must be in [0, 1), got {self.rate}")
        if self.mode not in DROPOUT_MODES:
            raise ContractError(f"unknown dropout mode {self.mode!r}")

    @property
    def active(self) -> bool:
        return self.mode != "off" and self.rate > 0.0


OFF = DropoutSpec(0.0, "off")


# ---------------------------------------------------------------- init


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_gru(rng: np.random.Generator, input_size: int, hidden_size: int) -> GruWeights:
    return GruWeights(
        w_ih=nd.param(_uniform(rng, (3 * hidden_size, input_size), hidden_size)),
        w_hh=nd.param(_uniform(rng, (3 * hidden_size, hidden_size), hidden_size)),
        bias=nd.param(_uniform(rng, (3 * hidden_size,), hidden_size)),
    )


def init_mlp(rng: np.random.Generator, sizes: Sequence[int], activations: Sequence[str]) -> MlpWeights:
    if len(activations) != len(sizes) - 1:
        raise ContractError("need one activation per layer")
    layers = []
    for fan_in, fan_out, act in zip(sizes, sizes[1:], activations):
        layers.append(
            Layer(
                nd.param(_uniform(rng, (fan_out, fan_in), fan_in)),
                nd.param(_uniform(rng, (fan_out,), fan_in)),
                act,
            )
        )
    return MlpWeights(layers)


# ---------------------------------------------------------------- parameter trees


def named_parameters(tree, prefix: str = "") -> dict[str, Node]:
    """Flatten nested weight dataclasses / lists into ``{dotted.name: Node}``."""
    out: dict[str, Node] = {}
    for name, value in _walk(tree, prefix):
        out[name] = value
    return out


def _walk(obj, prefix) -> Iterator[tuple[str, Node]]:
    if isinstance(obj, Node):
        yield prefix, obj
    elif is_dataclass(obj):
        for f in fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, (Node, list)) or is_dataclass(v):
                yield from _walk(v, f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, list):
        for i, v in enumerate(obj):
            yield from _walk(v, f"{prefix}.{i}")


def load_into(tree, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
    """Copy arrays into the matching parameters of ``tree`` (shapes must agree)."""
    params = named_parameters(tree, prefix)
    missing = sorted(set(params) - set(arrays))
    if missing:
        raise KeyError(f"checkpoint lacks parameters: {', '.join(missing[:5])}")
    for name, node in params.items():
        arr = arrays[name]
        if arr.shape != node.value.shape:
            raise ContractError(f"{name}: checkpoint shape {arr.shape} != model shape {node.value.shape}")
        node.value = np.array(arr, dtype=np.float64)


# ---------------------------------------------------------------- forward


def _batch(x) -> Node:
    x = x if isinstance(x, Node) else nd.const(x)
    if x.value.ndim == 1:
        # (n,) -> (1, n) by row-broadcasting against a zero row
        x = nd.add(nd.const(np.zeros((1, x.value.shape[0]))), x)
    return x


def input_gates(x, w: GruWeights) -> Node:
    """``x W_ih^T + b`` for a whole stack of inputs at once."""
    x = _batch(x)
    return nd.add(nd.matmul(x, w.w_ih, transpose_b=True), w.bias)


def gru_step_gates(gx: Node, h: Node, w: GruWeights) -> Node:
    """GRU update given precomputed input gates ``gx = x W_ih^T + b``."""
    H = w.hidden_size
    if h.value.shape[-1] != H or gx.value.shape[-1] != 3 * H:
        raise ContractError(f"GRU expects hidden size {H}, got h {h.value.shape}, gates {gx.value.shape}")
    return gru_cell(gx, h, w.w_hh)


def gru_cell(gx: Node, h: Node, w_hh: Node) -> Node:
    """Fused GRU recurrence: one graph node instead of a dozen.

    ``gx`` ``(B, 3H)`` holds the input gates, ``h`` ``(B, H)`` the state and
    ``w_hh`` ``(3H, H)`` the recurrent weights, gate order (z, r, n).
    """
    gxv, hv, wv = gx.value, h.value, w_hh.value
    H = hv.shape[-1]
    gh = hv @ wv.T
    zr = nd.sigmoid_values(gxv[:, :2 * H] + gh[:, :2 * H])
    z, r = zr[:, :H], zr[:, H:]
    c = gh[:, 2 * H:]
    n = np.tanh(gxv[:, 2 * H:] + r * c)
    out = n + z * (hv - n)

    def bw(g):
        dn = g * (1.0 - z) * (1.0 - n * n)
        dz = g * (hv - n) * z * (1.0 - z)
        dr = dn * c * r * (1.0 - r)
        dgx = np.concatenate([dz, dr, dn], axis=1)
        dgh = np.concatenate([dz, dr, dn * r], axis=1)
        return dgx, g * z + dgh @ wv, dgh.T @ hv

    return nd.make_op(out, "gru_cell", (gx, h, w_hh), bw)


def gru_step(x, h, w: GruWeights) -> Node:
    """One GRU update.

    z = sigmoid(W_z x + U_z h + b_z), r = sigmoid(W_r x + U_r h + b_r),
    n = tanh(W_n x + r * (U_n h) + b_n), h' = (1 - z) * n + z * h.
    """
    x, h = _batch(x), _batch(h)
    if x.value.shape[-1] != w.input_size:
        raise ContractError(f"GRU expects input size {w.input_size}, got {x.value.shape[-1]}")
    if x.value.shape[0] != h.value.shape[0]:
        raise ContractError(f"batch mismatch between x {x.value.shape} and h {h.value.shape}")
    return gru_step_gates(input_gates(x, w), h, w)


def gru_fold(xs: Sequence[Node] | Node, h0: Node, w: GruWeights) -> Node:
    """Run the GRU over a sequence and return the last hidden state.

    ``xs`` is either a list of ``(B, D)`` nodes or one ``(T*B, D)`` node with
    time-major rows; in the latter case the input projection is done in one
    matmul.
    """
    B = h0.value.shape[0]
    if isinstance(xs, Node):
        T = xs.value.shape[0] // B
        gx_all = input_gates(xs, w)
        gates = [nd.slice_(gx_all, t * B, (t + 1) * B, axis=0) for t in range(T)]
    else:
        gates = [input_gates(x, w) for x in xs]
    h = h0
    for gx in gates:
        h = gru_step_gates(gx, h, w)
    return h


def dropout_apply(x: Node, drop: DropoutSpec, rng: np.random.Generator | None) -> Node:
    """Inverted dropout: keep with probability 1-p and rescale by 1/(1-p)."""
    if not isinstance(drop, DropoutSpec):
        raise ContractError("dropout needs a DropoutSpec")
    if not drop.active:
        return x
    if rng is None:
        raise ContractError("active dropout needs an rng")
    keep = rng.random(x.value.shape) >= drop.rate
    return nd.mul(x, nd.const(keep / (1.0 - drop.rate)))


def mlp_forward(
    x, w: MlpWeights, dropout: DropoutSpec = OFF, rng: np.random.Generator | None = None
) -> Node:
    """Affine + activation per layer. Dropout, when active, is applied to every
    hidden activation (never to the output layer)."""
    x = _batch(x)
    if x.value.shape[-1] != w.layers[0].weight.shape[1]:
        raise ContractError(f"MLP expects input size {w.layers[0].weight.shape[1]}, got {x.value.shape[-1]}")
    last = len(w.layers) - 1
    for i, layer in enumerate(w.layers):
        x = nd.add(nd.matmul(x, layer.weight, transpose_b=True), layer.bias)
        if layer.activation == "tanh":
            x = nd.tanh(x)
        if i < last:
            x = dropout_apply(x, dropout, rng)
    return x
