"""File-level pipeline behind the command line: configuration, artifact
layout, and the gen-data / train / eval / sample / plot steps.

Layout under the output root::

    data/{train,val,test}.jsonl
    checkpoints/ego-<tag>.ckpt, checkpoints/joint-<tag>.ckpt
    curves/ego-<tag>.tsv, curves/joint-<tag>.tsv
    reports/report.txt, reports/report.tsv
    samples/<scene>--<tag>.json
    plots/<scene>--<tag>.svg
    config.<command>.json      effective configuration of the last run of each command
    MANIFEST.sha256            content hash of every other file
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import synthdata as sd
from .evalkit import (
    EvalSettings,
    MetricReport,
    MissingCheckpoint,
    config_hash,
    forecast_boxes_with_ego,
    ego_modes_for,
    eval_k,
    forecast_ego,
    run_benchmark,
)
from .plots import ForecastDump, emit_plot
from .training import TrainConfig, load_weights, save_weights, stream_seed, train_ego, train_joint
from .variants import ModelVariant, ego_checkpoints_needed, get_variant, parse_variants
from .windows import SceneArrays, scene_arrays

OUT_ENV = "EGOFORECAST_OUT"
DEFAULT_OUT = "runs"
MANIFEST = "MANIFEST.sha256"

DEFAULT_CONFIG = {
    "seed": 0,
    "variants": "reference",
    "data": dict(sd.DEFAULT_SPLIT_SIZES),
    "train": TrainConfig().to_dict(),
    "eval": asdict(EvalSettings()) | {"group_by": None},
}
# keys whose value the global --seed copies in
_SEEDED = (("train", "seed"), ("eval", "seed"))


class ConfigError(KeyError):
    def __str__(self) -> str:
        return str(self.args[0])


# ---------------------------------------------------------------- configuration


def default_output_root() -> Path:
    return Path(os.environ.get(OUT_ENV, DEFAULT_OUT))


def _merge(base: dict, update: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in out:
            raise ConfigError(f"unknown config key '{where}'")
        if isinstance(out[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key '{where}' must be a section")
            out[key] = _merge(out[key], value, where + ".")
        else:
            out[key] = value
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_overrides(items: list[str]) -> dict:
    """``["train.hidden=32", "seed=3"]`` -> nested dict; values parsed as JSON when possible."""
    out: dict = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not key=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = _parse_value(value)
    return out


def resolve_config(config_path=None, overrides: list[str] | None = None, flags: dict | None = None) -> dict:
    """Built-in defaults < config file < key=value overrides < explicit flags."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if config_path is not None:
        path = Path(config_path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        cfg = _merge(cfg, json.loads(path.read_text()))
    cfg = _merge(cfg, parse_overrides(overrides or []))
    flags = {k: v for k, v in (flags or {}).items() if v is not None}
    if "seed" in flags:
        cfg["seed"] = flags["seed"]
    for section, key in _SEEDED:
        cfg[section][key] = cfg["seed"]
    for name, (section, key) in {"k": ("eval", "k"), "n_dropout": ("eval", "n_dropout"),
                                 "epochs": ("train", None)}.items():
        if name not in flags:
            continue
        if key is None:
            cfg["train"]["ego_epochs"] = cfg["train"]["joint_epochs"] = flags[name]
        else:
            cfg[section][key] = flags[name]
    if "variants" in flags:
        cfg["variants"] = flags["variants"]
    TrainConfig.from_dict(cfg["train"])
    parse_variants(cfg["variants"])
    return cfg


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig.from_dict(cfg["train"])


def eval_settings(cfg: dict) -> EvalSettings:
    e = {k: v for k, v in cfg["eval"].items() if k != "group_by"}
    e["dropout_rate"] = cfg["train"]["dropout_rate"]
    return EvalSettings(**e)


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_effective_config(out: Path, command: str, cfg: dict) -> None:
    write_json(out / f"config.{command}.json", cfg)


# ---------------------------------------------------------------- manifest


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out: Path) -> Path:
    """Hash every file under ``out`` (sorted by relative path) into the sidecar manifest."""
    out = Path(out)
    lines = []
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != MANIFEST:
            lines.append(f"{sha256_file(p)}  {p.relative_to(out).as_posix()}")
    path = out / MANIFEST
    path.write_text("\n".join(lines) + ("\n" if lines else ""))
    return path


# ---------------------------------------------------------------- data


def data_path(out: Path, split: str) -> Path:
    return Path(out) / "data" / f"{split}.jsonl"


def gen_data(out: Path, cfg: dict) -> dict[str, Path]:
    sizes = {split: int(cfg["data"][split]) for split in sd.SPLIT_IDS}
    ds = sd.generate_dataset(int(cfg["seed"]), sizes)
    paths = {}
    for split, scenes in ds.items():
        p = data_path(out, split)
        p.parent.mkdir(parents=True, exist_ok=True)
        sd.write_dataset(scenes, p)
        paths[split] = p
    return paths


def dataset_id(out: Path) -> str:
    h = hashlib.sha256()
    for split in sd.SPLIT_IDS:
        p = data_path(out, split)
        if not p.exists():
            raise FileNotFoundError(f"dataset file not found: {p}")
        h.update(sha256_file(p).encode())
    return h.hexdigest()[:12]


def load_split(out: Path, split: str) -> SceneArrays:
    return scene_arrays(sd.read_dataset(data_path(out, split)))


# ---------------------------------------------------------------- training


def ckpt_path(out: Path, phase: str, tag: str) -> Path:
    return Path(out) / "checkpoints" / f"{phase}-{tag}.ckpt"


def curve_path(out: Path, phase: str, tag: str) -> Path:
    return Path(out) / "curves" / f"{phase}-{tag}.tsv"


def _meta(cfg: dict, tag: str, phase: str, result, did: str) -> dict:
    t = cfg["train"]
    return {
        "variant": tag,
        "phase": phase,
        "hidden": t["hidden"],
        "embed": t["embed"],
        "dropout_rate": t["dropout_rate"],
        "seed": cfg["seed"],
        "best_epoch": result.best_epoch,
        "best_val": result.best_val,
        "dataset_id": did,
        "config_hash": config_hash(t),
    }


def _train_one_ego(args):
    out, cfg, tag = args
    out = Path(out)
    tr, va = load_split(out, "train"), load_split(out, "val")
    res = train_ego(tr, va, train_config(cfg), get_variant(tag))
    _save_result(out, "ego", tag, res, cfg)
    return tag


def _train_one_joint(args):
    out, cfg, tag = args
    out = Path(out)
    v = get_variant(tag)
    ego = None
    if v.prior in ("predicted-mean", "predicted-sampled"):
        p = ckpt_path(out, "ego", v.ego_source)
        if not p.exists():
            raise MissingCheckpoint(tag, f"ego checkpoint '{v.ego_source}' ({p})")
        ego, _ = load_weights(p)
    tr, va = load_split(out, "train"), load_split(out, "val")
    res = train_joint(tr, va, train_config(cfg), v, ego)
    _save_result(out, "joint", tag, res, cfg)
    return tag


def _save_result(out: Path, phase: str, tag: str, res, cfg: dict) -> None:
    p = ckpt_path(out, phase, tag)
    p.parent.mkdir(parents=True, exist_ok=True)
    save_weights(p, res.weights, _meta(cfg, tag, phase, res, dataset_id(out)))
    c = curve_path(out, phase, tag)
    c.parent.mkdir(parents=True, exist_ok=True)
    c.write_text(res.curve_text())


def _map(fn, jobs_args, jobs: int):
    if jobs > 1 and len(jobs_args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(fn, jobs_args))
    return [fn(a) for a in jobs_args]


def ego_tags_for(variants: list[ModelVariant]) -> list[str]:
    return ego_checkpoints_needed(variants)


def run_train_ego(out: Path, cfg: dict, jobs: int = 1) -> list[str]:
    tags = ego_tags_for(parse_variants(cfg["variants"]))
    return _map(_train_one_ego, [(str(out), cfg, t) for t in tags], jobs)


def run_train_joint(out: Path, cfg: dict, jobs: int = 1) -> list[str]:
    tags = [v.tag for v in parse_variants(cfg["variants"]) if v.needs_joint_checkpoint]
    for t in tags:
        v = get_variant(t)
        if v.prior in ("predicted-mean", "predicted-sampled") and not ckpt_path(out, "ego", v.ego_source).exists():
            raise MissingCheckpoint(t, f"ego checkpoint '{v.ego_source}'")
    return _map(_train_one_joint, [(str(out), cfg, t) for t in tags], jobs)


# ---------------------------------------------------------------- evaluation


def load_models(out: Path, variants: list[ModelVariant]) -> dict:
    models = {}
    for v in variants:
        if v.is_baseline:
            continue
        phase = "ego" if v.table == "ego" else "joint"
        p = ckpt_path(out, phase, v.tag)
        if not p.exists():
            raise MissingCheckpoint(v.tag, f"{phase} checkpoint ({p})")
        models[v.tag], _ = load_weights(p)
    return models


def run_eval(out: Path, cfg: dict) -> MetricReport:
    variants = parse_variants(cfg["variants"])
    models = load_models(out, variants)
    test = load_split(out, "test")
    report = run_benchmark(
        test, variants, models, eval_settings(cfg),
        dataset_id=dataset_id(out), cfg_hash=config_hash(cfg), group_by=cfg["eval"].get("group_by"),
    )
    rdir = Path(out) / "reports"
    rdir.mkdir(parents=True, exist_ok=True)
    (rdir / "report.txt").write_text(report.to_text())
    (rdir / "report.tsv").write_text(report.to_tsv())
    return report


def sample_path(out: Path, scene_id: str, tag: str) -> Path:
    return Path(out) / "samples" / f"{scene_id}--{tag}.json"


def plot_path(out: Path, scene_id: str, tag: str) -> Path:
    return Path(out) / "plots" / f"{scene_id}--{tag}.svg"


def _find_scene(out: Path, scene_id: str, split: str = "test"):
    scenes = sd.read_dataset(data_path(out, split))
    for i, s in enumerate(scenes):
        if s.scene_id == scene_id:
            return i, s
    raise KeyError(f"scene '{scene_id}' not in {data_path(out, split)}")


def run_sample(out: Path, cfg: dict, scene_id: str, tag: str) -> Path:
    """Forecast one test scene with one variant and dump it as JSON."""
    v = get_variant(tag)
    models = load_models(out, [v])
    _, scene = _find_scene(out, scene_id)
    data = scene_arrays([scene])
    s = eval_settings(cfg)
    dump = ForecastDump(scene_id, tag)
    if v.table == "ego":
        if v.is_baseline:
            dump.ego_modes = forecast_ego(v, data, models, s)[0]
            dump.ego_mean = dump.ego_modes[0]
            dump.ego_variance = np.zeros_like(dump.ego_mean)
        else:
            rng = np.random.default_rng(stream_seed(s.seed, "eval", tag))
            fc = ego_modes_for(v, models[tag], data.ego_past, s, rng, eval_k(v, s))
            dump.ego_mean, dump.ego_variance, dump.ego_modes = fc.mean[0], fc.variance[0], fc.modes[0]
    else:
        boxes, fc = forecast_boxes_with_ego(v, data, models, s)
        dump.boxes = boxes[0]
        if fc is not None:
            dump.ego_mean, dump.ego_variance, dump.ego_modes = fc.mean[0], fc.variance[0], fc.modes[0]
    p = sample_path(out, scene_id, tag)
    write_json(p, dump.to_json())
    return p


def run_plot(out: Path, scene_id: str, tag: str) -> Path:
    p = sample_path(out, scene_id, tag)
    if not p.exists():
        raise FileNotFoundError(f"forecast dump not found: {p} (run 'sample' first)")
    dump = ForecastDump.from_json(json.loads(p.read_text()))
    _, scene = _find_scene(out, scene_id)
    target = plot_path(out, scene_id, tag)
    target.parent.mkdir(parents=True, exist_ok=True)
    return emit_plot(dump, scene, target)
