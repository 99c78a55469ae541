"""Synthetic egocentric driving scenes.

The ego vehicle follows a planar (v, yaw rate) profile integrated with the same
dead-reckoning routine the evaluation uses. One target agent moves in the
world frame and is projected into a forward-looking pinhole camera. World and
ego frames are right-handed with x forward and y to the left.

Dataset files are line-delimited JSON: a header record followed by one scene
per line. Invisible boxes are written as ``null``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable

import numpy as np

from .egomotion import DT, Pose2D, dead_reckon_poses
from .ndtensor import ContractError

EGO_KINDS = ("ego-straight", "ego-left-turn", "ego-right-turn", "ego-stop")
TARGET_KINDS = ("leading", "oncoming", "crossing-left", "crossing-right", "stopped")
SEQ_LEN = 30
IMAGE_W, IMAGE_H = 1920, 1200
FORMAT_NAME = "egoforecast.scenes"
FORMAT_VERSION = 1
MIN_DEPTH = 0.5
SPLIT_IDS = {"train": 0, "val": 1, "test": 2}
DEFAULT_SPLIT_SIZES = {"train": 1200, "val": 100, "test": 100}


@dataclass(frozen=True)
class Camera:
    focal: float = 1000.0
    width: int = IMAGE_W
    height: int = IMAGE_H
    cx: float = 960.0
    cy: float = 600.0
    mount_height: float = 1.5

    def __post_init__(self):
        if self.focal <= 0:
            raise ContractError("focal length must be positive")


@dataclass(frozen=True)
class ScenarioConfig:
    ego_kind: str = "ego-straight"
    target_kind: str = "leading"
    speed_range: tuple[float, float] = (4.0, 11.0)
    yaw_rate_range: tuple[float, float] = (0.15, 0.4)
    target_speed_range: tuple[float, float] = (2.0, 8.0)
    odom_noise: tuple[float, float] = (0.1, 0.01)
    box_jitter: float = 0.002
    box_jitter_corr: float = 0.95
    length: int = SEQ_LEN
    seed: int = 0

    def validate(self) -> None:
        if self.ego_kind not in EGO_KINDS:
            raise ContractError(f"unknown ego kind {self.ego_kind!r}")
        if self.target_kind not in TARGET_KINDS:
            raise ContractError(f"unknown target kind {self.target_kind!r}")
        for name in ("speed_range", "target_speed_range"):
            lo, hi = getattr(self, name)
            if not 0.0 <= lo <= hi <= 20.0:
                raise ContractError(f"{name} must satisfy 0 <= lo <= hi <= 20 m/s, got {(lo, hi)}")
        lo, hi = self.yaw_rate_range
        if not 0.0 <= lo <= hi <= 0.6:
            raise ContractError(f"yaw_rate_range must lie in [0, 0.6] rad/s, got {(lo, hi)}")
        if min(self.odom_noise) < 0 or self.box_jitter < 0:
            raise ContractError("noise levels must be non-negative")
        if not 0.0 <= self.box_jitter_corr < 1.0:
            raise ContractError("box_jitter_corr must be in [0, 1)")
        if self.length < 2:
            raise ContractError("sequence length must be >= 2")


@dataclass
class Scene:
    scene_id: str
    ego_kind: str
    target_kind: str
    seed: int
    odom_clean: np.ndarray  # (L, 2) v [m/s], yaw rate [rad/s]; step t moves pose t-1 -> t
    odom: np.ndarray  # (L, 2) noisy observation
    ego_xy: np.ndarray  # (L, 2) world position
    ego_yaw: np.ndarray  # (L,)
    target_xy: np.ndarray  # (L, 2) world position
    target_size: np.ndarray  # (2,) physical width, height [m]
    boxes_clean: np.ndarray  # (L, 4) normalized cx, cy, w, h; NaN when not visible
    boxes: np.ndarray  # (L, 4) jittered observation
    flow: np.ndarray  # (L, 4) first differences of ``boxes``; zeros where undefined
    visible: np.ndarray  # (L,) bool
    camera: Camera = field(default_factory=Camera)

    def pose(self, t: int) -> Pose2D:
        return Pose2D.from_yaw(float(self.ego_yaw[t]), self.ego_xy[t])

    def __eq__(self, other) -> bool:
        if not isinstance(other, Scene):
            return NotImplemented
        for f in fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            if isinstance(a, np.ndarray):
                if a.shape != b.shape or a.dtype != b.dtype or not np.array_equal(a, b, equal_nan=True):
                    return False
            elif a != b:
                return False
        return True


# ---------------------------------------------------------------- kinematics


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def ego_profile(cfg: ScenarioConfig, rng: np.random.Generator) -> np.ndarray:
    """Clean (v, yaw rate) per tick for the configured manoeuvre."""
    t = np.arange(cfg.length, dtype=np.float64)
    lo, hi = cfg.speed_range
    v0 = rng.uniform(lo, hi)
    yaw = np.zeros_like(t)
    if cfg.ego_kind == "ego-straight":
        accel = rng.uniform(-0.5, 0.5)
        v = np.clip(v0 + accel * t * DT, 0.0, 20.0)
    elif cfg.ego_kind in ("ego-left-turn", "ego-right-turn"):
        onset = rng.uniform(2.0, 12.0)
        rate = rng.uniform(*cfg.yaw_rate_range)
        sign = 1.0 if cfg.ego_kind == "ego-left-turn" else -1.0
        yaw = sign * rate * _smoothstep((t - onset) / 10.0)
        # slow down into the turn
        v = v0 * (1.0 - 0.35 * _smoothstep((t - onset + 5.0) / 12.0))
    else:
        v0 = rng.uniform(lo, hi)
        decel = rng.uniform(4.0, 6.0)
        stop_ticks = v0 / (decel * DT)
        onset = rng.uniform(0.0, max(0.0, min(10.0, cfg.length - 3 - stop_ticks)))
        v = np.maximum(0.0, v0 - decel * DT * np.maximum(0.0, t - onset))
    return np.stack([v, yaw], axis=-1)


def target_track(cfg: ScenarioConfig, ego_v0: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """World positions ``(L, 2)`` and physical size ``(W, H)`` of the target."""
    kind = cfg.target_kind
    tlo, thi = cfg.target_speed_range
    if kind == "leading":
        p0 = (rng.uniform(10.0, 30.0), rng.uniform(-0.5, 0.5))
        heading, speed = 0.0, float(np.clip(ego_v0 + rng.uniform(-4.0, 1.0), 0.0, 20.0))
    elif kind == "oncoming":
        p0 = (rng.uniform(45.0, 75.0), rng.uniform(2.5, 4.5))
        heading, speed = np.pi, rng.uniform(max(tlo, 4.0), max(thi, 4.0))
    elif kind == "crossing-left":
        p0 = (rng.uniform(25.0, 40.0), rng.uniform(4.0, 10.0))
        heading, speed = -np.pi / 2, rng.uniform(tlo, min(thi, 6.0))
    elif kind == "crossing-right":
        p0 = (rng.uniform(25.0, 40.0), rng.uniform(-10.0, -4.0))
        heading, speed = np.pi / 2, rng.uniform(tlo, min(thi, 6.0))
    else:
        p0 = (rng.uniform(30.0, 50.0), rng.choice([-1.0, 1.0]) * rng.uniform(2.5, 4.5))
        heading, speed = 0.0, 0.0
    size = np.array([rng.uniform(1.6, 2.0), rng.uniform(1.4, 1.8)])
    t = np.arange(cfg.length, dtype=np.float64) * DT
    direction = np.array([np.cos(heading), np.sin(heading)])
    xy = np.asarray(p0) + speed * t[:, None] * direction
    return xy, size


# ---------------------------------------------------------------- projection


def project(p_ego, size, camera: Camera = Camera()) -> np.ndarray | None:
    """Pixel box ``(u, v, w, h)`` of a target at ego-frame position ``p_ego``,
    or ``None`` when it is behind the camera or its centre leaves the image."""
    x_e, y_e = float(p_ego[0]), float(p_ego[1])
    if x_e <= MIN_DEPTH:
        return None
    f = camera.focal
    W, H = float(size[0]), float(size[1])
    u = camera.cx - f * (y_e / x_e)
    # target stands on the ground plane; camera sits mount_height above it
    v = camera.cy + f * (camera.mount_height - 0.5 * H) / x_e
    if not (0.0 <= u <= camera.width and 0.0 <= v <= camera.height):
        return None
    return np.array([u, v, f * W / x_e, f * H / x_e])


def normalize_box(box_px, camera: Camera = Camera()) -> np.ndarray:
    return np.asarray(box_px, dtype=np.float64) / np.array([camera.width, camera.height, camera.width, camera.height])


def to_pixels(box_norm, camera: Camera = Camera()) -> np.ndarray:
    return np.asarray(box_norm, dtype=np.float64) * np.array([camera.width, camera.height, camera.width, camera.height])


# ---------------------------------------------------------------- generation


def _ego_track(odom_clean: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    Rs, Ts = dead_reckon_poses(odom_clean[1:], Pose2D.identity())
    xy = np.vstack([np.zeros((1, 2)), Ts])
    yaw = np.concatenate([[0.0], np.arctan2(Rs[:, 1, 0], Rs[:, 0, 0])])
    return xy, yaw, Rs


def generate_scene(
    cfg: ScenarioConfig, rng: np.random.Generator | None = None, scene_id: str = "scene", max_tries: int = 200
) -> Scene:
    """Draw one scene. The target is redrawn until it is visible over the
    observation window (the first 10 ticks)."""
    cfg.validate()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    camera = Camera()
    odom_clean = ego_profile(cfg, rng)
    ego_xy, ego_yaw, Rs = _ego_track(odom_clean)
    rotations = np.concatenate([np.eye(2)[None], Rs])
    L = cfg.length
    obs = min(10, L)
    for _ in range(max_tries):
        target_xy, size = target_track(cfg, odom_clean[0, 0], rng)
        boxes_clean = np.full((L, 4), np.nan)
        for t in range(L):
            p_e = (target_xy[t] - ego_xy[t]) @ rotations[t]
            box = project(p_e, size, camera)
            if box is not None:
                boxes_clean[t] = normalize_box(box, camera)
        visible = ~np.isnan(boxes_clean[:, 0])
        if visible[:obs].all():
            break
    else:
        raise RuntimeError(f"{scene_id}: no visible target after {max_tries} draws")

    sv, sw = cfg.odom_noise
    odom = odom_clean + rng.standard_normal((L, 2)) * np.array([sv, sw])
    boxes = boxes_clean + box_jitter(L, cfg.box_jitter, cfg.box_jitter_corr, rng)
    boxes[:, 2:] = np.maximum(boxes[:, 2:], 1e-4)
    flow = np.zeros((L, 4))
    both = visible[1:] & visible[:-1]
    flow[1:][both] = (boxes[1:] - boxes[:-1])[both]
    return Scene(
        scene_id=scene_id,
        ego_kind=cfg.ego_kind,
        target_kind=cfg.target_kind,
        seed=int(cfg.seed),
        odom_clean=odom_clean,
        odom=odom,
        ego_xy=ego_xy,
        ego_yaw=ego_yaw,
        target_xy=target_xy,
        target_size=size,
        boxes_clean=boxes_clean,
        boxes=np.where(visible[:, None], boxes, np.nan),
        flow=flow,
        visible=visible,
        camera=camera,
    )


def box_jitter(length: int, std: float, corr: float, rng: np.random.Generator) -> np.ndarray:
    """Stationary AR(1) noise per box coordinate with marginal std ``std``.

    Tracker output drifts smoothly rather than jumping independently each
    frame; ``corr`` is the lag-1 correlation (0 gives i.i.d. jitter).
    """
    eps = rng.standard_normal((length, 4))
    out = np.empty((length, 4))
    out[0] = eps[0]
    innov = np.sqrt(1.0 - corr * corr)
    for t in range(1, length):
        out[t] = corr * out[t - 1] + innov * eps[t]
    return out * std


def scene_seed(base_seed: int, split: str, index: int) -> int:
    """Per-scene seed; disjoint across splits for a given base seed."""
    ss = np.random.SeedSequence([int(base_seed), SPLIT_IDS[split], int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def generate_split(split: str, n: int, base_seed: int, **overrides) -> list[Scene]:
    """``n`` scenes cycling through every (ego kind, target kind) pair."""
    combos = [(e, t) for e in EGO_KINDS for t in TARGET_KINDS]
    scenes = []
    for i in range(n):
        ego_kind, target_kind = combos[i % len(combos)]
        seed = scene_seed(base_seed, split, i)
        cfg = ScenarioConfig(ego_kind=ego_kind, target_kind=target_kind, seed=seed, **overrides)
        scenes.append(generate_scene(cfg, np.random.default_rng(seed), scene_id=f"{split}-{i:04d}"))
    return scenes


def generate_dataset(base_seed: int, sizes: dict[str, int] | None = None, **overrides) -> dict[str, list[Scene]]:
    sizes = sizes or DEFAULT_SPLIT_SIZES
    return {split: generate_split(split, n, base_seed, **overrides) for split, n in sizes.items()}


# ---------------------------------------------------------------- file format


class DatasetFormatError(ValueError):
    pass


_ARRAY_FIELDS = ("odom_clean", "odom", "ego_xy", "ego_yaw", "target_xy", "target_size", "boxes_clean", "boxes", "flow")


def _header(camera: Camera, count: int) -> dict:
    return {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "dt": DT,
        "image_size": [IMAGE_W, IMAGE_H],
        "camera": asdict(camera),
        "count": count,
        "units": {
            "odom": "v m/s, yaw_rate rad/s",
            "ego_xy": "m (world)",
            "ego_yaw": "rad",
            "target_xy": "m (world)",
            "target_size": "m (width, height)",
            "boxes": "normalized cx, cy, w, h",
            "flow": "normalized per-tick difference",
        },
    }


def _encode(arr: np.ndarray):
    # json writes floats with repr(), which round-trips float64 exactly
    if arr.ndim == 0:
        return float(arr)
    return [_encode(a) if a.ndim else (None if np.isnan(a) else float(a)) for a in arr]


def _scene_record(s: Scene) -> dict:
    rec = {"scene_id": s.scene_id, "ego_kind": s.ego_kind, "target_kind": s.target_kind, "seed": s.seed}
    for name in _ARRAY_FIELDS:
        rec[name] = _encode(getattr(s, name))
    rec["visible"] = [bool(v) for v in s.visible]
    return rec


def write_dataset(scenes: Iterable[Scene], path) -> None:
    scenes = list(scenes)
    camera = scenes[0].camera if scenes else Camera()
    lines = [json.dumps(_header(camera, len(scenes)), sort_keys=True)]
    lines += [json.dumps(_scene_record(s), sort_keys=True, allow_nan=False) for s in scenes]
    Path(path).write_text("\n".join(lines) + "\n")


def _decode(value, name: str, lineno: int) -> np.ndarray:
    try:
        arr = np.array(value, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise DatasetFormatError(f"line {lineno}: field {name!r} is not numeric ({exc})") from None
    return arr


def read_dataset(path) -> list[Scene]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    lines = path.read_text().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DatasetFormatError(f"{path}: line 1: missing header record")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{path}: line 1: malformed header ({exc.msg})") from None
    if header.get("format") != FORMAT_NAME:
        raise DatasetFormatError(f"{path}: line 1: not a {FORMAT_NAME} file")
    if header.get("version") != FORMAT_VERSION:
        raise DatasetFormatError(
            f"{path}: line 1: format version {header.get('version')} is not supported (expected {FORMAT_VERSION})"
        )
    camera = Camera(**header["camera"])
    scenes = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(f"{path}: line {lineno}: malformed record ({exc.msg})") from None
        try:
            arrays = {name: _decode(rec[name], name, lineno) for name in _ARRAY_FIELDS}
            scenes.append(
                Scene(
                    scene_id=str(rec["scene_id"]),
                    ego_kind=str(rec["ego_kind"]),
                    target_kind=str(rec["target_kind"]),
                    seed=int(rec["seed"]),
                    visible=np.array(rec["visible"], dtype=bool),
                    camera=camera,
                    **arrays,
                )
            )
        except KeyError as exc:
            raise DatasetFormatError(f"{path}: line {lineno}: missing field {exc.args[0]!r}") from None
    if header.get("count") not in (None, len(scenes)):
        raise DatasetFormatError(f"{path}: header declares {header['count']} scenes, found {len(scenes)}")
    return scenes
