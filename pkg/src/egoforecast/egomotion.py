"""Future ego-motion stream: GRU encoder/decoder over (velocity, yaw rate),
per-step bivariate heads, mode sampling and dead reckoning.

The network works in *model units*: odometry divided by ``EGO_SCALE``
(so ``v`` of 10 m/s and a yaw rate of 0.5 rad/s both map to 1). Forecasts
returned by :func:`sample_ego_modes` are converted back to m/s and rad/s.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import ndtensor as nd
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
from .uncertainty import FusedGaussian, Gauss2D, fuse, masked_mean, nll_rows, sample_moments, sq_err_rows

DT = 0.1
T_OBS = 10
HORIZON = 20
EGO_SCALE = np.array([10.0, 0.5])


class OdomStep(NamedTuple):
    v: float
    yaw_rate: float


@dataclass
class Pose2D:
    R: np.ndarray
    T: np.ndarray

    @classmethod
    def identity(cls) -> "Pose2D":
        return cls(np.eye(2), np.zeros(2))

    @classmethod
    def from_yaw(cls, yaw: float, T=(0.0, 0.0)) -> "Pose2D":
        return cls(rotation(yaw), np.asarray(T, dtype=np.float64))

    @property
    def yaw(self) -> float:
        return float(np.arctan2(self.R[1, 0], self.R[0, 0]))

    def to_local(self, p: np.ndarray) -> np.ndarray:
        """World points ``(..., 2)`` into this pose's frame: ``R^T (p - T)``."""
        return (np.asarray(p) - self.T) @ self.R


def rotation(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s], [s, c]])


@dataclass
class EgoWeights:
    enc_embed: MlpWeights
    encoder: GruWeights
    dec_embed: MlpWeights
    decoder: GruWeights
    head: MlpWeights

    @property
    def hidden_size(self) -> int:
        return self.encoder.hidden_size


def init_ego_weights(rng: np.random.Generator, hidden: int = 64, embed: int = 32) -> EgoWeights:
    return EgoWeights(
        enc_embed=init_mlp(rng, [2, embed], ["tanh"]),
        encoder=init_gru(rng, embed, hidden),
        dec_embed=init_mlp(rng, [2, embed], ["tanh"]),
        decoder=init_gru(rng, embed, hidden),
        head=init_mlp(rng, [hidden, embed, 5], ["tanh", "identity"]),
    )


# ---------------------------------------------------------------- network


def to_model_units(odom) -> np.ndarray:
    return np.asarray(odom, dtype=np.float64) / EGO_SCALE


def encode_ego(past, w: EgoWeights) -> Node:
    """Fold the encoder GRU over MLP-embedded past odometry.

    ``past`` is ``(B, T_OBS, 2)`` (or ``(T_OBS, 2)``) in model units.
    """
    past = np.asarray(past, dtype=np.float64)
    if past.ndim == 2:
        past = past[None]
    if past.shape[1:] != (T_OBS, 2):
        raise ContractError(f"encode_ego expects {T_OBS} odometry steps, got shape {past.shape}")
    B = past.shape[0]
    # time-major stack so the embedding and input projection are single matmuls
    xs = mlp_forward(past.transpose(1, 0, 2).reshape(T_OBS * B, 2), w.enc_embed)
    return gru_fold(xs, nd.const(np.zeros((B, w.hidden_size))), w.encoder)


def predict_ego(
    hidden: Node,
    last_obs,
    w: EgoWeights,
    dropout: DropoutSpec = OFF,
    horizon: int = HORIZON,
    rng: np.random.Generator | None = None,
) -> list[Node]:
    """Unroll the decoder; returns one ``(B, 5)`` raw head per future step.

    The first decoder input is the last observed step, later inputs are the
    previous step's predicted mean.
    """
    if horizon < 1:
        raise ContractError("horizon must be >= 1")
    x = last_obs if isinstance(last_obs, Node) else nd.const(np.atleast_2d(np.asarray(last_obs, dtype=np.float64)))
    h = hidden
    heads = []
    for _ in range(horizon):
        h = gru_step(mlp_forward(x, w.dec_embed), h, w.decoder)
        out = mlp_forward(h, w.head, dropout, rng)
        heads.append(out)
        x = nd.slice_(out, 0, 2)
    return heads


def ego_forward(past, w: EgoWeights, dropout: DropoutSpec = OFF, horizon: int = HORIZON, rng=None) -> list[Node]:
    past = np.asarray(past, dtype=np.float64)
    if past.ndim == 2:
        past = past[None]
    return predict_ego(encode_ego(past, w), past[:, -1, :], w, dropout, horizon, rng)


def ego_loss(heads: list[Node], future, kind: str = "nll") -> Node:
    """Mean per-step loss against ``future`` ``(B, horizon, 2)`` in model units."""
    future = np.asarray(future, dtype=np.float64)
    if future.ndim == 2:
        future = future[None]
    out = nd.concat(heads, axis=0)
    y = future.transpose(1, 0, 2).reshape(-1, 2)
    rows = nll_rows(y, out) if kind == "nll" else sq_err_rows(y, out)
    return masked_mean(rows)


def stack_heads(heads: list[Node]) -> np.ndarray:
    """``(B, horizon, 5)`` array from a list of per-step head nodes."""
    return np.stack([h.value for h in heads], axis=1)


# ---------------------------------------------------------------- sampling


@dataclass
class EgoForecast:
    """Per-step fused distribution and sampled modes, in physical units.

    ``mean``/``variance``/``epistemic``/``aleatoric`` are ``(B, horizon, 2)``;
    ``rho`` is ``(B, horizon)``; ``modes`` is ``(B, k, horizon, 2)`` with
    mode 0 equal to the fused mean.
    """

    mean: np.ndarray
    variance: np.ndarray
    epistemic: np.ndarray
    aleatoric: np.ndarray
    rho: np.ndarray
    modes: np.ndarray


def sample_ego_modes(
    past,
    w: EgoWeights,
    k: int = 10,
    n_dropout: int = 10,
    dropout_rate: float = 0.0,
    rng: np.random.Generator | None = None,
    aleatoric: bool = True,
    horizon: int = HORIZON,
    temporal: str = "shared",
) -> EgoForecast:
    """Run ``n_dropout`` MC-dropout decoder passes, fuse them per step and draw
    ``k`` odometry sequences.

    With ``temporal="shared"`` each mode reuses one standard-normal draw for
    all steps (coherent modes); ``"independent"`` redraws per step. Either way
    every step's marginal is the fused Gaussian.
    """
    if k < 1:
        raise ContractError("k must be >= 1")
    if n_dropout < 1:
        raise ContractError("n_dropout must be >= 1")
    past = to_model_units(past)
    if past.ndim == 2:
        past = past[None]
    B = past.shape[0]
    drop = DropoutSpec(dropout_rate, "mc-sample") if dropout_rate > 0 else OFF
    with nd.no_grad():
        hidden = encode_ego(past, w)
        # replicate each sequence n_dropout times; every row draws its own masks
        h_rep = nd.const(np.repeat(hidden.value, n_dropout, axis=0))
        last = np.repeat(past[:, -1, :], n_dropout, axis=0)
        heads = stack_heads(predict_ego(h_rep, last, w, drop, horizon, rng))
    heads = heads.reshape(B, n_dropout, horizon, 5).transpose(1, 0, 2, 3)
    g = Gauss2D.from_head(heads)
    var = g.variance if aleatoric else np.zeros_like(g.mu)
    fused = fuse(g.mu, var)
    rho = g.rho.mean(axis=0) if aleatoric else np.zeros(fused.mean.shape[:-1])
    sigma = np.sqrt(fused.variance)

    modes = np.empty((B, k, horizon, 2))
    modes[:, 0] = fused.mean
    if k > 1:
        if temporal == "shared":
            z = rng.standard_normal((B, k - 1, 1, 2)) * np.ones((1, 1, horizon, 1))
        elif temporal == "independent":
            z = rng.standard_normal((B, k - 1, horizon, 2))
        else:
            raise ContractError(f"unknown temporal mode {temporal!r}")
        modes[:, 1:] = sample_moments(
            fused.mean[:, None], sigma[:, None], rho[:, None] * np.ones((1, k - 1, 1)), z=z
        )
    sc, sc2 = EGO_SCALE, EGO_SCALE**2
    return EgoForecast(
        fused.mean * sc, fused.variance * sc2, fused.epistemic * sc2, fused.aleatoric * sc2, rho, modes * sc
    )


# ---------------------------------------------------------------- geometry


def dead_reckon_poses(odom, start: Pose2D | None = None, dt: float = DT) -> tuple[np.ndarray, np.ndarray]:
    """Compose per-step motions into poses.

    Each step rotates by ``yaw_rate * dt`` and then advances ``v * dt`` along
    the new heading, so the step's relative transform is
    ``R_step = rot(w dt)``, ``T_step = R_step @ (v dt, 0)``; these are chained
    as ``R_0^i = R_0^{i-1} R_step`` and ``T_0^i = T_0^{i-1} + R_0^{i-1} T_step``.

    Returns rotations ``(T, 2, 2)`` and translations ``(T, 2)`` after each step.
    """
    odom = np.asarray(odom, dtype=np.float64).reshape(-1, 2)
    if not np.isfinite(odom).all():
        raise ContractError("dead_reckon: non-finite odometry")
    start = start or Pose2D.identity()
    R = np.array(start.R, dtype=np.float64)
    T = np.array(start.T, dtype=np.float64)
    Rs = np.empty((len(odom), 2, 2))
    Ts = np.empty((len(odom), 2))
    for i, (v, w) in enumerate(odom):
        R_step = rotation(w * dt)
        T_step = R_step @ np.array([v * dt, 0.0])
        T = T + R @ T_step
        R = R @ R_step
        Rs[i], Ts[i] = R, T
    return Rs, Ts


def dead_reckon(odom, start: Pose2D | None = None, dt: float = DT) -> np.ndarray:
    """2-D positions after each odometry step, ``(T, 2)``."""
    return dead_reckon_poses(odom, start, dt)[1]


def dead_reckon_batch(odom: np.ndarray, dt: float = DT) -> np.ndarray:
    """Vectorised :func:`dead_reckon` from the identity pose over leading axes.

    Uses cumulative heading angles instead of matrix products; agrees with the
    matrix form to rounding.
    """
    odom = np.asarray(odom, dtype=np.float64)
    heading = np.cumsum(odom[..., 1] * dt, axis=-1)
    step = odom[..., 0] * dt
    return np.stack([np.cumsum(step * np.cos(heading), -1), np.cumsum(step * np.sin(heading), -1)], -1)


def const_vel_ego(past, horizon: int = HORIZON) -> np.ndarray:
    """Repeat the last observed (v, yaw rate) for every future step."""
    past = np.asarray(past, dtype=np.float64)
    if past.shape[-2] < 1:
        raise ContractError("const_vel_ego needs at least one observed step")
    last = past[..., -1:, :]
    return np.repeat(last, horizon, axis=-2)
