"""Static SVG figures of one scene's forecast.

Three panels: (a) velocity and yaw rate against time with a +-2 sigma band,
(b) bird's-eye ego modes, (c) pixel-space box-centre trajectories with the
final sampled boxes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402

from .egomotion import DT, T_OBS, dead_reckon_batch  # noqa: E402
from .ndtensor import ContractError  # noqa: E402
from .synthdata import Scene, to_pixels  # noqa: E402


@dataclass
class ForecastDump:
    """One scene's forecast as written by the ``sample`` command.

    ``ego_mean``/``ego_variance`` are ``(T, 2)`` in m/s and rad/s,
    ``ego_modes`` is ``(k, T, 2)``; ``boxes`` is ``(k, T, 4)`` normalized.
    Empty arrays mean "not forecast".
    """

    scene_id: str
    variant: str = ""
    ego_mean: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    ego_variance: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    ego_modes: np.ndarray = field(default_factory=lambda: np.zeros((0, 0, 2)))
    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 0, 4)))

    def to_json(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "variant": self.variant,
            "ego_mean": self.ego_mean.tolist(),
            "ego_variance": self.ego_variance.tolist(),
            "ego_modes": self.ego_modes.tolist(),
            "boxes": self.boxes.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "ForecastDump":
        def arr(key, empty_shape):
            a = np.asarray(d.get(key, []), dtype=np.float64)
            return a.reshape(empty_shape) if a.size == 0 else a

        return cls(
            d["scene_id"], d.get("variant", ""),
            arr("ego_mean", (0, 2)), arr("ego_variance", (0, 2)),
            arr("ego_modes", (0, 0, 2)), arr("boxes", (0, 0, 4)),
        )


_STYLE = {
    "svg.hashsalt": "egoforecast",
    "svg.fonttype": "path",
    "font.size": 8,
    "lines.linewidth": 1.0,
}


def emit_plot(dump: ForecastDump, scene: Scene, out_path) -> Path:
    if dump.scene_id != scene.scene_id:
        raise ContractError(f"forecast is for scene {dump.scene_id!r} but scene is {scene.scene_id!r}")
    out_path = Path(out_path)
    with plt.rc_context(_STYLE):
        fig = plt.figure(figsize=(11, 6.5))
        grid = fig.add_gridspec(2, 3)
        ax_v = fig.add_subplot(grid[0, 0])
        ax_w = fig.add_subplot(grid[1, 0])
        ax_bev = fig.add_subplot(grid[:, 1])
        ax_img = fig.add_subplot(grid[:, 2])
        _odometry_panel(ax_v, ax_w, dump, scene)
        _bev_panel(ax_bev, dump, scene)
        _image_panel(ax_img, dump, scene)
        fig.suptitle(f"{scene.scene_id}  {dump.variant}".strip())
        fig.tight_layout()
        fig.savefig(out_path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return out_path


def _odometry_panel(ax_v, ax_w, dump: ForecastDump, scene: Scene) -> None:
    L = len(scene.odom)
    t = np.arange(L) * DT
    tf = t[T_OBS : T_OBS + len(dump.ego_mean)]
    for ax, j, name in ((ax_v, 0, "v [m/s]"), (ax_w, 1, "yaw rate [rad/s]")):
        ax.plot(t, scene.odom_clean[:, j], color="black", label="ground truth")
        ax.plot(t[:T_OBS], scene.odom[:T_OBS, j], color="0.5", linestyle=":", label="observed")
        if len(dump.ego_mean):
            mu = dump.ego_mean[:, j]
            sd = np.sqrt(np.maximum(dump.ego_variance[:, j], 0.0))
            ax.fill_between(tf, mu - 2 * sd, mu + 2 * sd, color="tab:blue", alpha=0.25, linewidth=0)
            ax.plot(tf, mu, color="tab:blue", label="forecast mean")
        ax.set_ylabel(name)
        ax.axvline(t[T_OBS - 1], color="0.7", linewidth=0.5)
    ax_w.set_xlabel("time [s]")
    ax_v.legend(loc="best", frameon=False)


def _bev_panel(ax, dump: ForecastDump, scene: Scene) -> None:
    origin = scene.pose(T_OBS - 1)
    gt = origin.to_local(scene.ego_xy)
    ax.plot(gt[:, 1], gt[:, 0], color="black", label="ground truth")
    for i, m in enumerate(dump.ego_modes):
        xy = dead_reckon_batch(m)
        ax.plot(xy[:, 1], xy[:, 0], color="tab:blue" if i == 0 else "tab:orange",
                alpha=1.0 if i == 0 else 0.6, label="mode 0 (mean)" if i == 0 else None)
    target = origin.to_local(scene.target_xy)
    ax.plot(target[:, 1], target[:, 0], color="tab:red", linestyle="--", label="target")
    ax.invert_xaxis()  # left of the ego car drawn on the left
    ax.set_xlabel("lateral [m]")
    ax.set_ylabel("forward [m]")
    ax.set_aspect("equal", adjustable="datalim")
    ax.legend(loc="best", frameon=False)


def _image_panel(ax, dump: ForecastDump, scene: Scene) -> None:
    cam = scene.camera
    gt = to_pixels(scene.boxes_clean, cam)
    vis = scene.visible
    ax.plot(np.where(vis, gt[:, 0], np.nan), np.where(vis, gt[:, 1], np.nan), color="black", label="ground truth")
    obs = to_pixels(scene.boxes[:T_OBS], cam)
    ax.plot(obs[:, 0], obs[:, 1], color="0.5", linestyle=":", label="observed")
    for i, traj in enumerate(dump.boxes):
        px = to_pixels(traj, cam)
        color = "tab:blue" if i == 0 else "tab:orange"
        ax.plot(px[:, 0], px[:, 1], color=color, alpha=0.8)
        cx, cy, w, h = px[-1]
        ax.add_patch(Rectangle((cx - w / 2, cy - h / 2), w, h, fill=False, edgecolor=color, linewidth=0.6))
    last = np.flatnonzero(vis)
    if last.size:
        cx, cy, w, h = gt[last[-1]]
        ax.add_patch(Rectangle((cx - w / 2, cy - h / 2), w, h, fill=False, edgecolor="black", linewidth=1.0))
    ax.set_xlim(0, cam.width)
    ax.set_ylim(cam.height, 0)
    ax.set_aspect("equal")
    ax.set_xlabel("u [px]")
    ax.set_ylabel("v [px]")
    ax.legend(loc="best", frameon=False)
