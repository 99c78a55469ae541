"""Metrics, best-of-k selection and the benchmark runner.

Ego errors are measured on dead-reckoned 2-D positions in meters; box errors
on pixel-space box centres (ADE/FDE) and final-step IoU (FIOU). Future steps
where the target has left the image are excluded.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .egomotion import EGO_SCALE, EgoForecast, EgoWeights, const_vel_ego, dead_reckon_batch, sample_ego_modes
from .locnet import const_vel_boxes, encode_target, sample_box_trajectories
from .ndtensor import ContractError
from . import ndtensor as nd
from .synthdata import Camera, to_pixels
from .training import JointWeights, stream_seed
from .variants import REFERENCE_NUMBERS, ModelVariant
from .windows import SceneArrays

# ---------------------------------------------------------------- metrics


def ade_fde(pred, gt) -> tuple[float, float]:
    """Mean and final-step Euclidean distance between two ``(T, d)`` sequences."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ContractError(f"ade_fde: shape mismatch {pred.shape} vs {gt.shape}")
    if pred.ndim != 2 or len(pred) < 1:
        raise ContractError("ade_fde needs (T, d) sequences with T >= 1")
    d = np.sqrt(np.sum((pred - gt) ** 2, axis=-1))
    return float(d.mean()), float(d[-1])


def fiou(pred, gt) -> np.ndarray | float:
    """IoU of axis-aligned ``(cx, cy, w, h)`` boxes; broadcasts over leading axes."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    pl, pr = pred[..., 0] - pred[..., 2] / 2, pred[..., 0] + pred[..., 2] / 2
    pt, pb = pred[..., 1] - pred[..., 3] / 2, pred[..., 1] + pred[..., 3] / 2
    gl, gr = gt[..., 0] - gt[..., 2] / 2, gt[..., 0] + gt[..., 2] / 2
    gtop, gb = gt[..., 1] - gt[..., 3] / 2, gt[..., 1] + gt[..., 3] / 2
    iw = np.maximum(0.0, np.minimum(pr, gr) - np.maximum(pl, gl))
    ih = np.maximum(0.0, np.minimum(pb, gb) - np.maximum(pt, gtop))
    inter = iw * ih
    union = pred[..., 2] * pred[..., 3] + gt[..., 2] * gt[..., 3] - inter
    out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return float(out) if out.ndim == 0 else out


def corners_to_box(x1, y1, x2, y2) -> np.ndarray:
    return np.array([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], dtype=np.float64)


def best_of_k(samples, gt, metric, maximize: bool = False) -> tuple[float, int]:
    """Best metric value over the ``k`` samples and the index achieving it
    (first index on ties)."""
    if len(samples) < 1:
        raise ContractError("best_of_k needs k >= 1")
    vals = np.array([metric(s, gt) for s in samples], dtype=np.float64)
    i = int(np.argmax(vals) if maximize else np.argmin(vals))
    return float(vals[i]), i


# ---------------------------------------------------------------- vectorised per-scene errors


@dataclass
class SampleErrors:
    """Per-scene, per-sample errors. ``ade``/``fde``/``fiou`` are ``(N, k)``;
    NaN marks scenes where the quantity is undefined (nothing visible)."""

    ade: np.ndarray
    fde: np.ndarray
    fiou: np.ndarray


def ego_errors(xy: np.ndarray, gt_xy: np.ndarray) -> SampleErrors:
    """``xy`` ``(N, k, T, 2)`` against ``gt_xy`` ``(N, T, 2)``."""
    d = np.sqrt(np.sum((xy - gt_xy[:, None]) ** 2, axis=-1))
    nan = np.full(d.shape[:2], np.nan)
    return SampleErrors(d.mean(axis=-1), d[..., -1], nan)


def box_errors(pred_px: np.ndarray, gt_px: np.ndarray, mask: np.ndarray) -> SampleErrors:
    """``pred_px`` ``(N, k, T, 4)``, ``gt_px`` ``(N, T, 4)`` with NaN where ``mask`` is False."""
    m = mask[:, None, :]
    gt = np.where(mask[..., None], gt_px, 0.0)
    d = np.sqrt(np.sum((pred_px[..., :2] - gt[:, None, :, :2]) ** 2, axis=-1))
    count = m.sum(axis=-1)
    ade = np.where(count > 0, np.sum(np.where(m, d, 0.0), axis=-1) / np.maximum(count, 1), np.nan)
    last = mask[:, -1][:, None]
    fde = np.where(last, d[..., -1], np.nan)
    iou = fiou(pred_px[..., -1, :], np.where(mask[:, -1, None], gt[:, -1], 1.0)[:, None])
    return SampleErrors(ade, fde, np.where(last, iou, np.nan))


@dataclass
class MetricRow:
    table: str
    tag: str
    label: str
    group: str
    k: int
    n_scenes: int
    ade: float
    fde: float
    fiou: float
    # errors of the single sample with the lowest FDE
    joint_ade: float
    joint_fiou: float


def summarize(err: SampleErrors, table: str, variant: ModelVariant, group: str, k: int) -> MetricRow:
    valid_a = np.isfinite(err.ade[:, 0])
    ade = np.min(err.ade[valid_a], axis=1)
    valid_f = np.isfinite(err.fde[:, 0])
    fde = np.min(err.fde[valid_f], axis=1)
    pick = np.argmin(err.fde[valid_f], axis=1)
    rows = np.arange(valid_f.sum())
    joint_ade = err.ade[valid_f][rows, pick]
    if table == "box":
        f = np.max(err.fiou[valid_f], axis=1)
        jf = err.fiou[valid_f][rows, pick]
        fiou_v, joint_fiou = _mean(f), _mean(jf)
    else:
        fiou_v = joint_fiou = float("nan")
    return MetricRow(table, variant.tag, variant.label, group, k, int(valid_a.sum()),
                     _mean(ade), _mean(fde), fiou_v, _mean(joint_ade), joint_fiou)


def _mean(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    x = x[np.isfinite(x)]
    return float(x.mean()) if x.size else float("nan")


# ---------------------------------------------------------------- forecasts


class MissingCheckpoint(KeyError):
    def __init__(self, tag: str, what: str = "checkpoint"):
        super().__init__(tag)
        self.tag = tag
        self.message = f"missing {what} for variant '{tag}'"

    def __str__(self) -> str:
        return self.message


@dataclass
class EvalSettings:
    k: int = 10
    n_dropout: int = 10
    dropout_rate: float = 0.1
    seed: int = 0
    temporal: str = "shared"


def ego_modes_for(variant: ModelVariant, ego: EgoWeights, past_model: np.ndarray, s: EvalSettings,
                  rng: np.random.Generator, k: int):
    """Ego odometry modes ``(N, k, T, 2)`` in physical units plus the fused forecast."""
    unc = variant.uncertainty
    epistemic = unc in ("E", "AE")
    return sample_ego_modes(
        past_model * EGO_SCALE, ego, k=k,
        n_dropout=s.n_dropout if epistemic else 1,
        dropout_rate=s.dropout_rate if epistemic else 0.0,
        rng=rng, aleatoric=unc in ("A", "AE"), temporal=s.temporal,
    )


def eval_k(variant: ModelVariant, s: EvalSettings) -> int:
    return s.k if variant.stochastic else 1


def forecast_ego(variant: ModelVariant, data: SceneArrays, models: dict, s: EvalSettings) -> np.ndarray:
    """Sampled future odometry ``(N, k, T, 2)`` in m/s and rad/s."""
    past = data.ego_past * EGO_SCALE
    horizon = data.ego_future.shape[1]
    if variant.baseline == "const-vel":
        return const_vel_ego(past, horizon)[:, None]
    ego = _ego_weights(variant, models)
    rng = np.random.default_rng(stream_seed(s.seed, "eval", variant.tag))
    return ego_modes_for(variant, ego, data.ego_past, s, rng, eval_k(variant, s)).modes


def forecast_boxes(variant: ModelVariant, data: SceneArrays, models: dict, s: EvalSettings,
                   ego_modes: np.ndarray | None = None) -> np.ndarray:
    """Sampled future boxes ``(N, k, T, 4)`` in normalized image units.

    ``ego_modes`` (physical units) overrides the variant's own ego sampling.
    """
    return forecast_boxes_with_ego(variant, data, models, s, ego_modes)[0]


def forecast_boxes_with_ego(variant: ModelVariant, data: SceneArrays, models: dict, s: EvalSettings,
                            ego_modes: np.ndarray | None = None) -> tuple[np.ndarray, EgoForecast | None]:
    """As :func:`forecast_boxes`, also returning the ego forecast that conditioned
    the boxes (None when the variant has no predicted prior)."""
    horizon = data.box_future_rel.shape[1]
    if variant.baseline is not None:
        return const_vel_boxes(data.box_obs, variant.baseline == "const-vel-scaling", horizon)[:, None], None
    if variant.tag not in models:
        raise MissingCheckpoint(variant.tag)
    joint: JointWeights = models[variant.tag]
    rng = np.random.default_rng(stream_seed(s.seed, "eval", variant.tag))
    k = eval_k(variant, s)
    N = len(data)
    ego_fc = None
    if ego_modes is not None:
        modes = np.asarray(ego_modes, dtype=np.float64) / EGO_SCALE
    elif variant.prior == "none":
        modes = np.zeros((N, 1, horizon, 2))
    elif variant.prior == "ground-truth":
        modes = data.ego_future[:, None]
    else:
        n_modes = k if variant.prior == "predicted-sampled" else 1
        ego_fc = ego_modes_for(variant, joint.ego, data.ego_past, s, rng, n_modes)
        modes = ego_fc.modes / EGO_SCALE
    if modes.shape[1] != k and variant.box_uncertainty != "none":
        # one ego mode, k box samples drawn around it
        modes = np.repeat(modes[:, :1], k, axis=1)
    bu = variant.box_uncertainty
    epistemic = bu in ("E", "AE")
    with nd.no_grad():
        G = encode_target(data.box_obs, data.flow_obs, joint.loc)
    fc = sample_box_trajectories(
        G, modes, joint.loc, data.last_box,
        n_dropout=s.n_dropout if epistemic else 1,
        dropout_rate=s.dropout_rate if epistemic else 0.0,
        rng=rng, aleatoric=bu in ("A", "AE"), stochastic=bu != "none", horizon=horizon,
    )
    return fc.samples, ego_fc


def _ego_weights(variant: ModelVariant, models: dict) -> EgoWeights:
    w = models.get(variant.tag)
    if w is None:
        raise MissingCheckpoint(variant.tag)
    return w.ego if isinstance(w, JointWeights) else w


# ---------------------------------------------------------------- benchmark


def scenario_groups(data: SceneArrays, group_by: str | None) -> dict[str, np.ndarray]:
    groups = {"all": np.ones(len(data), dtype=bool)}
    if group_by is None:
        return groups
    if group_by not in ("ego_kind", "target_kind"):
        raise ContractError(f"unknown grouping {group_by!r}")
    kinds = np.array(getattr(data, group_by + "s"))
    for kind in sorted(set(kinds)):
        groups[kind] = kinds == kind
    if group_by == "ego_kind":
        groups["turn"] = np.isin(kinds, ["ego-left-turn", "ego-right-turn"])
    return groups


@dataclass
class MetricReport:
    rows: list[MetricRow]
    dataset_id: str
    seeds: list[int]
    config_hash: str
    k: int
    notes: list[str] = field(default_factory=list)

    def row(self, tag: str, group: str = "all") -> MetricRow:
        for r in self.rows:
            if r.tag == tag and r.group == group:
                return r
        raise KeyError(f"no row for {tag!r} in group {group!r}")

    def to_text(self) -> str:
        out = [
            f"dataset {self.dataset_id}  seeds {','.join(map(str, self.seeds))}  "
            f"config {self.config_hash}  k {self.k}",
        ]
        for table, title, unit in (("ego", "Future ego-motion", "m"), ("box", "Future object localization", "px")):
            rows = [r for r in self.rows if r.table == table]
            if not rows:
                continue
            out.append("")
            out.append(f"{title} (ADE/FDE in {unit})")
            head = f"{'Method':<26}{'group':<16}{'k':>3}{'n':>5}{'ADE':>10}{'FDE':>10}"
            if table == "box":
                head += f"{'FIOU':>8}"
            out.append(head)
            out.append("-" * len(head))
            for r in rows:
                line = f"{r.label:<26}{r.group:<16}{r.k:>3}{r.n_scenes:>5}{r.ade:>10.4f}{r.fde:>10.4f}"
                if table == "box":
                    line += f"{r.fiou:>8.4f}"
                out.append(line)
        refs = [(t, tag, v) for (t, tag), v in REFERENCE_NUMBERS.items() if any(r.tag == tag for r in self.rows)]
        if refs:
            out.append("")
            out.append("Published numbers on the real-world dataset, for context only (not reproduced here):")
            for t, tag, vals in refs:
                out.append(f"  [{t}] {tag}: " + ", ".join(f"{k} {v}" for k, v in vals.items()))
        for n in self.notes:
            out.append(n)
        return "\n".join(out) + "\n"

    def to_tsv(self) -> str:
        cols = ["table", "tag", "label", "group", "k", "n_scenes", "ade", "fde", "fiou", "joint_ade", "joint_fiou"]
        lines = [
            f"# dataset_id={self.dataset_id}\tseeds={','.join(map(str, self.seeds))}\tconfig_hash={self.config_hash}",
            "\t".join(cols),
        ]
        for r in self.rows:
            lines.append("\t".join(_fmt(getattr(r, c)) for c in cols))
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:12]


def run_benchmark(data: SceneArrays, variants: list[ModelVariant], models: dict, settings: EvalSettings,
                  dataset_id: str = "", cfg_hash: str = "", group_by: str | None = None,
                  camera: Camera = Camera()) -> MetricReport:
    """Evaluate every variant on ``data``; rows follow ``variants`` order, groups nested inside."""
    for v in variants:
        if not v.is_baseline and v.tag not in models:
            raise MissingCheckpoint(v.tag)
    groups = scenario_groups(data, group_by)
    gt_px = to_pixels(data.box_future_clean, camera)
    rows = []
    for v in variants:
        k = eval_k(v, settings)
        if v.table == "ego":
            odo = forecast_ego(v, data, models, settings)
            err = ego_errors(dead_reckon_batch(odo), data.ego_future_xy)
        else:
            pred = to_pixels(forecast_boxes(v, data, models, settings), camera)
            err = box_errors(pred, gt_px, data.box_mask)
        for name, sel in groups.items():
            sub = SampleErrors(err.ade[sel], err.fde[sel], err.fiou[sel])
            rows.append(summarize(sub, v.table, v, name, k))
    return MetricReport(rows, dataset_id, [settings.seed], cfg_hash, settings.k)
