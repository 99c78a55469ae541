"""Future object localization: box and flow GRU encoders, an ego-prior
conditioned GRU decoder with a two-factor Gaussian head, and autoregressive
multi-modal sampling.

Boxes are ``(cx, cy, w, h)`` normalized by the image size. Inside the network
they are re-expressed relative to the last observed box (scaled by
``BOX_REL_SCALE``), so a zero head means "stay where it was last seen".
Flow is the box's own inter-frame motion, standing in for pooled optical flow.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndtensor as nd
from .egomotion import HORIZON, T_OBS
from .ndtensor import ContractError, Node
from .neural import (
    OFF,
    DropoutSpec,
    GruWeights,
    MlpWeights,
    gru_fold,
    gru_step,
    init_gru,
    init_mlp,
    mlp_forward,
)
from .uncertainty import Gauss2D, fuse, masked_mean, nll_rows, sample_moments, sq_err_rows

BOX_ABS_SCALE = 4.0
BOX_REL_SCALE = 10.0
FLOW_SCALE = 50.0
_BOX_ORIGIN = np.array([0.5, 0.5, 0.0, 0.0])
MIN_BOX_DIM = 1e-4


@dataclass
class LocWeights:
    box_embed: MlpWeights
    box_encoder: GruWeights
    flow_embed: MlpWeights
    flow_encoder: GruWeights
    bridge: MlpWeights
    dec_embed: MlpWeights
    decoder: GruWeights
    head: MlpWeights

    @property
    def hidden_size(self) -> int:
        return self.decoder.hidden_size


def init_loc_weights(rng: np.random.Generator, hidden: int = 64, embed: int = 32) -> LocWeights:
    return LocWeights(
        box_embed=init_mlp(rng, [4, embed], ["tanh"]),
        box_encoder=init_gru(rng, embed, hidden),
        flow_embed=init_mlp(rng, [4, embed], ["tanh"]),
        flow_encoder=init_gru(rng, embed, hidden),
        bridge=init_mlp(rng, [2 * hidden, hidden], ["tanh"]),
        dec_embed=init_mlp(rng, [6, embed], ["tanh"]),
        decoder=init_gru(rng, embed, hidden),
        head=init_mlp(rng, [hidden, embed, 10], ["tanh", "identity"]),
    )


# ---------------------------------------------------------------- frames


def to_relative(boxes, last_obs) -> np.ndarray:
    return (np.asarray(boxes, dtype=np.float64) - np.asarray(last_obs)[..., None, :]) * BOX_REL_SCALE


def from_relative(rel, last_obs) -> np.ndarray:
    return np.asarray(rel) / BOX_REL_SCALE + np.asarray(last_obs)[..., None, :]


def _encode_seq(seq: np.ndarray, embed: MlpWeights, gru: GruWeights) -> Node:
    B, T, _ = seq.shape
    xs = mlp_forward(seq.transpose(1, 0, 2).reshape(T * B, 4), embed)
    return gru_fold(xs, nd.const(np.zeros((B, gru.hidden_size))), gru)


def encode_target(boxes, flow, w: LocWeights) -> Node:
    """``G = Phi(flow) ++ Theta(boxes)``: flow encoding first, box encoding second.

    ``boxes`` and ``flow`` are ``(B, T_OBS, 4)`` in normalized image units.
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    flow = np.asarray(flow, dtype=np.float64)
    if boxes.ndim == 2:
        boxes, flow = boxes[None], flow[None]
    if boxes.shape[1] != T_OBS or flow.shape[1] != T_OBS:
        raise ContractError(f"encode_target expects {T_OBS} boxes and flows, got {boxes.shape[1]} and {flow.shape[1]}")
    if boxes.shape != flow.shape:
        raise ContractError(f"box/flow shape mismatch: {boxes.shape} vs {flow.shape}")
    phi = _encode_seq(flow * FLOW_SCALE, w.flow_embed, w.flow_encoder)
    theta = _encode_seq((boxes - _BOX_ORIGIN) * BOX_ABS_SCALE, w.box_embed, w.box_encoder)
    return nd.concat([phi, theta], axis=-1)


def _prior_steps(ego_prior, horizon: int, batch: int) -> list[Node]:
    if isinstance(ego_prior, list):
        steps = ego_prior
    else:
        arr = np.asarray(ego_prior, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None]
        steps = [nd.const(arr[:, t, :]) for t in range(arr.shape[1])]
    if len(steps) != horizon:
        raise ContractError(f"ego prior has {len(steps)} steps, horizon is {horizon}")
    if steps and steps[0].value.shape[0] != batch:
        raise ContractError(f"ego prior batch {steps[0].value.shape[0]} != {batch}")
    return steps


def decoder_init(G: Node, w: LocWeights) -> Node:
    return mlp_forward(G, w.bridge)


def decoder_step(prev: Node, prior_t: Node, h: Node, w: LocWeights) -> Node:
    x = mlp_forward(nd.concat([prev, prior_t], axis=-1), w.dec_embed)
    return gru_step(x, h, w.decoder)


def predict_boxes(
    G: Node,
    ego_prior,
    w: LocWeights,
    dropout: DropoutSpec = OFF,
    horizon: int = HORIZON,
    rng: np.random.Generator | None = None,
) -> list[Node]:
    """Decode ``horizon`` raw 10-dim heads ``(B, 10)`` in the relative frame.

    ``ego_prior`` is ``(B, horizon, 2)`` ego odometry in ego model units, or a
    list of per-step nodes. Each step's input is the previous box mean
    concatenated with that step's prior.
    """
    B = G.value.shape[0]
    priors = _prior_steps(ego_prior, horizon, B)
    h = decoder_init(G, w)
    prev = nd.const(np.zeros((B, 4)))
    heads = []
    for t in range(horizon):
        h = decoder_step(prev, priors[t], h, w)
        out = mlp_forward(h, w.head, dropout, rng)
        heads.append(out)
        prev = nd.concat([nd.slice_(out, 0, 2), nd.slice_(out, 5, 7)], axis=-1)
    return heads


def box_loss(heads: list[Node], future_rel, mask=None, kind: str = "nll") -> Node:
    """Mean over valid (sequence, step) pairs of the centre + size losses."""
    future_rel = np.asarray(future_rel, dtype=np.float64)
    if future_rel.ndim == 2:
        future_rel = future_rel[None]
    out = nd.concat(heads, axis=0)
    y = future_rel.transpose(1, 0, 2).reshape(-1, 4)
    m = None if mask is None else np.asarray(mask, dtype=np.float64).T.reshape(-1, 1)
    if m is not None:
        # invisible steps carry NaN targets; zero them so the masked rows stay finite
        y = np.where(m > 0, y, 0.0)
    rows_fn = nll_rows if kind == "nll" else sq_err_rows
    rows = nd.add(rows_fn(y[:, :2], out, 0), rows_fn(y[:, 2:], out, 5))
    return masked_mean(rows, m)


def head_factors(out: np.ndarray) -> tuple[Gauss2D, Gauss2D]:
    return Gauss2D.from_head(out, 0), Gauss2D.from_head(out, 5)


# ---------------------------------------------------------------- sampling


@dataclass
class BoxForecast:
    """``samples`` ``(B, k, horizon, 4)`` in normalized image units; ``mean`` and
    ``variance`` are the fused per-step moments each trajectory was drawn from,
    in the same units. Trajectory 0 is the deterministic mean rollout."""

    samples: np.ndarray
    mean: np.ndarray
    variance: np.ndarray


def sample_box_trajectories(
    G: Node,
    ego_modes,
    w: LocWeights,
    last_obs,
    n_dropout: int = 1,
    dropout_rate: float = 0.0,
    rng: np.random.Generator | None = None,
    aleatoric: bool = True,
    stochastic: bool = True,
    horizon: int = HORIZON,
) -> BoxForecast:
    """One autoregressive rollout per ego mode.

    At every step the decoder head is evaluated ``n_dropout`` times, fused, and
    a box is drawn from the fused centre and size Gaussians; that draw is the
    next step's input. ``ego_modes`` is ``(B, k, horizon, 2)`` in ego model
    units. With ``stochastic=False`` every trajectory follows its fused mean.
    """
    ego_modes = np.asarray(ego_modes, dtype=np.float64)
    if ego_modes.ndim == 3:
        ego_modes = ego_modes[None]
    B, k = ego_modes.shape[:2]
    if k < 1:
        raise ContractError("need at least one ego mode")
    if ego_modes.shape[2] != horizon:
        raise ContractError(f"ego modes have {ego_modes.shape[2]} steps, horizon is {horizon}")
    last_obs = np.asarray(last_obs, dtype=np.float64).reshape(B, 4)
    drop = DropoutSpec(dropout_rate, "mc-sample") if dropout_rate > 0 else OFF
    n = n_dropout if drop.active else 1
    rows = B * k
    mean = np.empty((rows, horizon, 4))
    var = np.empty((rows, horizon, 4))
    samples = np.empty((rows, horizon, 4))
    priors = ego_modes.reshape(rows, horizon, 2)
    first = np.zeros(rows, dtype=bool)
    first[::k] = True
    with nd.no_grad():
        h = nd.const(np.repeat(decoder_init(G, w).value, k, axis=0))
        prev = np.zeros((rows, 4))
        for t in range(horizon):
            h = decoder_step(nd.const(prev), nd.const(priors[:, t]), h, w)
            h_rep = nd.const(np.repeat(h.value[None], n, axis=0).reshape(n * rows, -1))
            out = mlp_forward(h_rep, w.head, drop, rng).value.reshape(n, rows, 10)
            step = np.empty((rows, 4))
            for sl, off in ((slice(0, 2), 0), (slice(2, 4), 5)):
                g = Gauss2D.from_head(out, off)
                v = g.variance if aleatoric else np.zeros_like(g.mu)
                fused = fuse(g.mu, v)
                mean[:, t, sl] = fused.mean
                var[:, t, sl] = fused.variance
                if stochastic:
                    rho = g.rho.mean(axis=0) if aleatoric else np.zeros(rows)
                    draw = sample_moments(fused.mean, np.sqrt(fused.variance), rho, rng)
                    step[:, sl] = np.where(first[:, None], fused.mean, draw)
                else:
                    step[:, sl] = fused.mean
            samples[:, t] = step
            prev = step
    # back to absolute normalized boxes
    last_rep = np.repeat(last_obs, k, axis=0)
    abs_samples = from_relative(samples, last_rep)
    abs_samples[..., 2:] = np.maximum(abs_samples[..., 2:], MIN_BOX_DIM)
    return BoxForecast(
        abs_samples.reshape(B, k, horizon, 4),
        from_relative(mean, last_rep).reshape(B, k, horizon, 4),
        (var / BOX_REL_SCALE**2).reshape(B, k, horizon, 4),
    )


# ---------------------------------------------------------------- baseline


def const_vel_boxes(boxes, scaling: bool, horizon: int = HORIZON) -> np.ndarray:
    """Linear extrapolation from the last two observed boxes.

    Centres always move by the last inter-frame delta; sizes stay frozen unless
    ``scaling`` is set, in which case they follow their last delta too (floored
    at ``MIN_BOX_DIM``).
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    if boxes.shape[-2] < 2:
        raise ContractError("const_vel_boxes needs at least two observed boxes")
    last, prev = boxes[..., -1, :], boxes[..., -2, :]
    steps = np.arange(1, horizon + 1, dtype=np.float64)[:, None]
    delta = last - prev
    if not scaling:
        delta = delta * np.array([1.0, 1.0, 0.0, 0.0])
    out = last[..., None, :] + steps * delta[..., None, :]
    out[..., 2:] = np.maximum(out[..., 2:], MIN_BOX_DIM)
    return out
