"""Cut scenes into (observation, future) windows as stacked arrays.

Every scene yields exactly one window: ticks ``0..T_OBS-1`` are observed and
the following ``HORIZON`` ticks are predicted. Network inputs and training
targets come from the noisy observations; evaluation ground truth comes from
the generator's clean state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .egomotion import HORIZON, T_OBS, to_model_units
from .locnet import to_relative
from .ndtensor import ContractError
from .synthdata import Scene


@dataclass
class SceneArrays:
    scene_ids: list[str]
    ego_kinds: list[str]
    target_kinds: list[str]
    ego_past: np.ndarray  # (N, T_OBS, 2) noisy odometry, model units
    ego_future: np.ndarray  # (N, HORIZON, 2) noisy odometry, model units
    ego_future_xy: np.ndarray  # (N, HORIZON, 2) clean positions in the last observed ego frame [m]
    box_obs: np.ndarray  # (N, T_OBS, 4) normalized
    flow_obs: np.ndarray  # (N, T_OBS, 4)
    last_box: np.ndarray  # (N, 4)
    box_future_rel: np.ndarray  # (N, HORIZON, 4) noisy, relative frame; NaN where not visible
    box_future_clean: np.ndarray  # (N, HORIZON, 4) normalized; NaN where not visible
    box_mask: np.ndarray  # (N, HORIZON) bool

    def __len__(self) -> int:
        return len(self.scene_ids)

    def take(self, idx) -> "SceneArrays":
        idx = np.asarray(idx)
        pick = lambda xs: [xs[i] for i in idx]  # noqa: E731
        arrays = {
            k: getattr(self, k)[idx]
            for k in self.__dataclass_fields__
            if isinstance(getattr(self, k), np.ndarray)
        }
        return SceneArrays(pick(self.scene_ids), pick(self.ego_kinds), pick(self.target_kinds), **arrays)


def scene_arrays(scenes: list[Scene], t_obs: int = T_OBS, horizon: int = HORIZON) -> SceneArrays:
    if not scenes:
        raise ContractError("no scenes")
    need = t_obs + horizon
    for s in scenes:
        if len(s.odom) < need:
            raise ContractError(f"scene {s.scene_id} has {len(s.odom)} ticks, need {need}")
        if not s.visible[:t_obs].all():
            raise ContractError(f"scene {s.scene_id}: target not visible over the observation window")
    odom = np.stack([s.odom[:need] for s in scenes])
    fut = slice(t_obs, need)
    xy = np.stack([s.pose(t_obs - 1).to_local(s.ego_xy[fut]) for s in scenes])
    boxes = np.stack([s.boxes[:need] for s in scenes])
    last = boxes[:, t_obs - 1]
    return SceneArrays(
        scene_ids=[s.scene_id for s in scenes],
        ego_kinds=[s.ego_kind for s in scenes],
        target_kinds=[s.target_kind for s in scenes],
        ego_past=to_model_units(odom[:, :t_obs]),
        ego_future=to_model_units(odom[:, fut]),
        ego_future_xy=xy,
        box_obs=boxes[:, :t_obs],
        flow_obs=np.stack([s.flow[:t_obs] for s in scenes]),
        last_box=last,
        box_future_rel=to_relative(boxes[:, fut], last),
        box_future_clean=np.stack([s.boxes_clean[fut] for s in scenes]),
        box_mask=np.stack([s.visible[fut] for s in scenes]),
    )
