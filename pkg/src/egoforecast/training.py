"""Optimization harness: RMSProp, step learning-rate schedules and the
two-phase protocol (ego stream alone, then both streams jointly)."""

from __future__ import annotations

import copy
import zlib
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from . import ndtensor as nd
from .egomotion import EgoWeights, ego_forward, ego_loss, init_ego_weights
from .locnet import LocWeights, box_loss, encode_target, init_loc_weights, predict_boxes
from .ndtensor import ContractError, Node, NumericError
from .neural import OFF, DropoutSpec, load_into, named_parameters
from .variants import ModelVariant
from .windows import SceneArrays


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr: float = 1e-3
    rms_decay: float = 0.99
    rms_eps: float = 1e-8
    ego_epochs: int = 100
    joint_epochs: int = 100
    ego_lr_factor: float = 2.0
    loc_lr_factor: float = 5.0
    lr_period: int = 20
    lambda_ego: float = 0.2
    lambda_box: float = 1.0
    grad_clip: float = 5.0
    hidden: int = 64
    embed: int = 32
    dropout_rate: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.lr < 0 or self.lambda_ego < 0 or self.lambda_box < 0:
            raise ContractError("learning rate and loss weights must be non-negative")
        if self.batch_size < 1 or self.hidden < 1 or self.embed < 1:
            raise ContractError("batch_size, hidden and embed must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ContractError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.lr_period < 1 or self.ego_lr_factor <= 0 or self.loc_lr_factor <= 0:
            raise ContractError("invalid learning-rate schedule")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise KeyError(f"unknown training keys: {', '.join(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------- optimizer


def lr_at(epoch: int, base: float, factor: float, period: int) -> float:
    """Step schedule: ``base / factor ** (epoch // period)``."""
    if epoch < 0:
        raise ContractError("epoch must be >= 0")
    return base / factor ** (epoch // period)


def rmsprop_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: dict[str, np.ndarray],
                 lr: float, decay: float = 0.99, eps: float = 1e-8) -> None:
    """In-place RMSProp update of ``params`` and ``state``.

    All gradients are checked before anything is touched, so a bad step leaves
    both untouched.
    """
    for name, g in grads.items():
        if name not in params:
            raise ContractError(f"gradient for unknown parameter {name}")
        if g.shape != params[name].shape:
            raise ContractError(f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}")
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name}; step aborted")
    for name, g in grads.items():
        s = state.get(name)
        s = (1.0 - decay) * g * g if s is None else decay * s + (1.0 - decay) * g * g
        state[name] = s
        params[name] -= lr * g / (np.sqrt(s) + eps)


class RMSProp:
    def __init__(self, params: dict[str, Node], decay: float = 0.99, eps: float = 1e-8, clip: float | None = None):
        self.params = params
        self.decay = decay
        self.eps = eps
        self.clip = clip
        self.state: dict[str, np.ndarray] = {}

    def step(self, grads: dict[Node, np.ndarray], lr: float) -> float:
        """Apply one update from ``backward`` output; returns the pre-clip gradient norm."""
        named = {name: grads[node] for name, node in self.params.items() if node in grads}
        norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in named.values())))
        if not np.isfinite(norm):
            raise NumericError("non-finite gradient norm; step aborted")
        if self.clip is not None and norm > self.clip:
            named = {k: g * (self.clip / norm) for k, g in named.items()}
        values = {name: node.value for name, node in self.params.items()}
        rmsprop_step(values, named, self.state, lr, self.decay, self.eps)
        return norm


# ---------------------------------------------------------------- results


@dataclass
class JointWeights:
    ego: EgoWeights
    loc: LocWeights


@dataclass
class CurveRow:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    val_box_loss: float = float("nan")


@dataclass
class TrainResult:
    weights: EgoWeights | JointWeights
    curve: list[CurveRow] = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = float("inf")

    def curve_text(self) -> str:
        lines = ["epoch\tlr\ttrain_loss\tval_loss\tval_box_loss"]
        for r in self.curve:
            lines.append(f"{r.epoch}\t{r.lr!r}\t{r.train_loss!r}\t{r.val_loss!r}\t{r.val_box_loss!r}")
        return "\n".join(lines) + "\n"


class TrainingDiverged(NumericError):
    pass


def stream_seed(seed: int, *labels: str) -> np.random.SeedSequence:
    """Independent, stable RNG stream per (seed, phase, variant)."""
    return np.random.SeedSequence([seed] + [zlib.crc32(s.encode()) for s in labels])


def _loss_kind(mode: str) -> str:
    return "nll" if mode in ("A", "AE") else "mse"


def _dropout(mode: str, rate: float) -> DropoutSpec:
    return DropoutSpec(rate, "train") if mode in ("E", "AE") and rate > 0 else OFF


def _batches(n: int, size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for i in range(0, n, size):
        yield perm[i : i + size]


def _snapshot(params: dict[str, Node]) -> dict[str, np.ndarray]:
    return {k: v.value.copy() for k, v in params.items()}


def _restore(params: dict[str, Node], snap: dict[str, np.ndarray]) -> None:
    for k, v in params.items():
        v.value = snap[k].copy()


def _run(params, opt, epochs, lr_fn, n_train, cfg, rng, batch_loss, val_loss, on_epoch):
    curve, best, best_epoch, snap = [], float("inf"), -1, _snapshot(params)
    for epoch in range(epochs):
        lr = lr_fn(epoch)
        total, count = 0.0, 0
        for idx in _batches(n_train, cfg.batch_size, rng):
            loss = batch_loss(idx)
            nd.zero_grad(params.values())
            grads = nd.backward(loss)
            opt.step(grads, lr)
            total += loss.value.item() * len(idx)
            count += len(idx)
        v, vb = val_loss()
        if not np.isfinite(v):
            raise TrainingDiverged(f"validation loss became non-finite at epoch {epoch}")
        row = CurveRow(epoch, lr, total / count, v, vb)
        curve.append(row)
        if v < best:
            best, best_epoch, snap = v, epoch, _snapshot(params)
        if on_epoch:
            on_epoch(row)
    _restore(params, snap)
    nd.zero_grad(params.values())
    return curve, best_epoch, best


# ---------------------------------------------------------------- phases


def train_ego(train: SceneArrays, val: SceneArrays, cfg: TrainConfig, variant: ModelVariant,
              on_epoch: Callable[[CurveRow], None] | None = None, epochs: int | None = None) -> TrainResult:
    """Train the ego-motion stream from scratch; keeps the best-validation weights."""
    if len(train) == 0:
        raise ContractError("empty training set")
    epochs = cfg.ego_epochs if epochs is None else epochs
    rng = np.random.default_rng(stream_seed(cfg.seed, "ego", variant.tag))
    w = init_ego_weights(rng, cfg.hidden, cfg.embed)
    params = named_parameters(w, "ego")
    kind = _loss_kind(variant.uncertainty)
    drop = _dropout(variant.uncertainty, cfg.dropout_rate)
    opt = RMSProp(params, cfg.rms_decay, cfg.rms_eps, cfg.grad_clip)

    def batch_loss(idx):
        heads = ego_forward(train.ego_past[idx], w, drop, rng=rng)
        return ego_loss(heads, train.ego_future[idx], kind)

    def val_loss():
        with nd.no_grad():
            v = ego_loss(ego_forward(val.ego_past, w), val.ego_future, kind).value.item()
        return v, float("nan")

    curve, best_epoch, best = _run(
        params, opt, epochs, lambda e: lr_at(e, cfg.lr, cfg.ego_lr_factor, cfg.lr_period),
        len(train), cfg, rng, batch_loss, val_loss, on_epoch,
    )
    return TrainResult(w, curve, best_epoch, best)


def joint_losses(data: SceneArrays, idx, weights: JointWeights, cfg: TrainConfig, variant: ModelVariant,
                 rng: np.random.Generator | None = None, train: bool = True) -> tuple[Node, Node, Node | None]:
    """``(total, box, ego)`` losses on the rows ``idx``; ``ego`` is None when the
    variant does not run the ego stream."""
    ego_spec = _dropout(variant.uncertainty, cfg.dropout_rate) if train else OFF
    box_spec = _dropout(variant.box_uncertainty, cfg.dropout_rate) if train else OFF
    G = encode_target(data.box_obs[idx], data.flow_obs[idx], weights.loc)
    l_ego = None
    if variant.prior in ("predicted-mean", "predicted-sampled"):
        heads = ego_forward(data.ego_past[idx], weights.ego, ego_spec, rng=rng)
        l_ego = ego_loss(heads, data.ego_future[idx], _loss_kind(variant.uncertainty))
        prior = [nd.slice_(h, 0, 2) for h in heads]
    elif variant.prior == "ground-truth":
        prior = data.ego_future[idx]
    else:
        prior = np.zeros((len(idx),) + data.ego_future.shape[1:])
    box_heads = predict_boxes(G, prior, weights.loc, box_spec, rng=rng)
    l_box = box_loss(box_heads, data.box_future_rel[idx], data.box_mask[idx], _loss_kind(variant.box_uncertainty))
    total = nd.scale(l_box, cfg.lambda_box)
    if l_ego is not None:
        total = nd.add(total, nd.scale(l_ego, cfg.lambda_ego))
    return total, l_box, l_ego


def train_joint(train: SceneArrays, val: SceneArrays, cfg: TrainConfig, variant: ModelVariant,
                ego_weights: EgoWeights | None = None, freeze_ego: bool = False,
                on_epoch: Callable[[CurveRow], None] | None = None, epochs: int | None = None) -> TrainResult:
    """Train the localization stream together with a pre-trained ego stream.

    The ego stream stays trainable (weighted by ``lambda_ego``) unless
    ``freeze_ego`` is set. Variants without a predicted prior never run the
    ego stream, so its weights are carried along untouched.
    """
    if len(train) == 0:
        raise ContractError("empty training set")
    uses_ego = variant.prior in ("predicted-mean", "predicted-sampled")
    if uses_ego and ego_weights is None:
        raise ContractError(f"variant {variant.tag} needs pre-trained ego weights")
    epochs = cfg.joint_epochs if epochs is None else epochs
    rng = np.random.default_rng(stream_seed(cfg.seed, "joint", variant.tag))
    ego = copy.deepcopy(ego_weights) if ego_weights is not None else init_ego_weights(rng, cfg.hidden, cfg.embed)
    weights = JointWeights(ego, init_loc_weights(rng, cfg.hidden, cfg.embed))
    params = named_parameters(weights.loc, "loc")
    if uses_ego and not freeze_ego:
        params.update(named_parameters(weights.ego, "ego"))
    frozen = [] if not freeze_ego else list(named_parameters(weights.ego).values())
    for node in frozen:
        node.requires_grad = False
    opt = RMSProp(params, cfg.rms_decay, cfg.rms_eps, cfg.grad_clip)
    all_rows = np.arange(len(val))

    def batch_loss(idx):
        return joint_losses(train, idx, weights, cfg, variant, rng, train=True)[0]

    def val_loss():
        with nd.no_grad():
            total, l_box, _ = joint_losses(val, all_rows, weights, cfg, variant, train=False)
        return total.value.item(), l_box.value.item()

    try:
        curve, best_epoch, best = _run(
            params, opt, epochs, lambda e: lr_at(e, cfg.lr, cfg.loc_lr_factor, cfg.lr_period),
            len(train), cfg, rng, batch_loss, val_loss, on_epoch,
        )
    finally:
        for node in frozen:
            node.requires_grad = True
    return TrainResult(weights, curve, best_epoch, best)


# ---------------------------------------------------------------- checkpoints


def weights_to_arrays(weights: EgoWeights | JointWeights) -> dict[str, Node]:
    if isinstance(weights, JointWeights):
        return {**named_parameters(weights.ego, "ego"), **named_parameters(weights.loc, "loc")}
    return named_parameters(weights, "ego")


def save_weights(path, weights: EgoWeights | JointWeights, meta: dict) -> None:
    kind = "joint" if isinstance(weights, JointWeights) else "ego"
    nd.save_checkpoint(path, weights_to_arrays(weights), {**meta, "kind": kind})


def load_weights(path) -> tuple[EgoWeights | JointWeights, dict]:
    arrays, meta = nd.load_checkpoint(path)
    hidden, embed = int(meta["hidden"]), int(meta["embed"])
    rng = np.random.default_rng(0)
    ego = init_ego_weights(rng, hidden, embed)
    load_into(ego, arrays, "ego")
    if meta.get("kind") == "joint":
        loc = init_loc_weights(rng, hidden, embed)
        load_into(loc, arrays, "loc")
        return JointWeights(ego, loc), meta
    return ego, meta
