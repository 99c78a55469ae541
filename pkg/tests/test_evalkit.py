import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from egoforecast.evalkit import (
    ade_fde,
    best_of_k,
    box_errors,
    corners_to_box,
    ego_errors,
    fiou,
)
from egoforecast.ndtensor import ContractError


def ade_fde_scalar(pred, gt):
    d = [math.hypot(p[0] - g[0], p[1] - g[1]) for p, g in zip(pred, gt)]
    return math.fsum(d) / len(d), d[-1]


def iou_scalar(a, b):
    """IoU from corner coordinates with plain float arithmetic."""
    ax1, ay1, ax2, ay2 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx1, by1, bx2, by2 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


class TestOracles:
    def test_ade_fde_on_random_cases(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            T = int(rng.integers(1, 30))
            pred, gt = rng.normal(scale=10, size=(2, T, 2))
            a, f = ade_fde(pred, gt)
            wa, wf = ade_fde_scalar(pred, gt)
            assert abs(a - wa) <= 1e-12 and abs(f - wf) <= 1e-12

    def test_fiou_on_random_cases(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            a = np.concatenate([rng.uniform(0, 10, 2), rng.uniform(0.1, 5, 2)])
            b = np.concatenate([rng.uniform(0, 10, 2), rng.uniform(0.1, 5, 2)])
            assert abs(fiou(a, b) - iou_scalar(a, b)) <= 1e-12

    def test_known_value(self):
        assert fiou(corners_to_box(0, 0, 2, 2), corners_to_box(1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-15)

    def test_identical_and_disjoint(self):
        b = corners_to_box(0, 0, 2, 3)
        assert fiou(b, b) == 1.0
        assert fiou(b, corners_to_box(5, 5, 6, 6)) == 0.0

    def test_ade_fde_shape_contract(self):
        with pytest.raises(ContractError):
            ade_fde(np.zeros((3, 2)), np.zeros((4, 2)))


class TestProperties:
    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=50, deadline=None)
    def test_iou_symmetric_and_translation_invariant(self, seed):
        rng = np.random.default_rng(seed)
        a = np.concatenate([rng.uniform(0, 4, 2), rng.uniform(0.2, 3, 2)])
        b = np.concatenate([rng.uniform(0, 4, 2), rng.uniform(0.2, 3, 2)])
        shift = np.array([*rng.uniform(-5, 5, 2), 0.0, 0.0])
        assert fiou(a, b) == pytest.approx(fiou(b, a), abs=1e-15)
        assert fiou(a + shift, b + shift) == pytest.approx(fiou(a, b), abs=1e-12)
        assert 0.0 <= fiou(a, b) <= 1.0

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=50, deadline=None)
    def test_best_of_k_non_increasing_in_k(self, seed):
        rng = np.random.default_rng(seed)
        gt = rng.normal(size=(12, 2))
        samples = rng.normal(size=(10, 12, 2))
        prev = math.inf
        for k in range(1, 11):
            v, _ = best_of_k(samples[:k], gt, lambda s, g: ade_fde(s, g)[0])
            assert v <= prev
            prev = v

    def test_best_of_k_maximize_and_tie_index(self):
        gt = corners_to_box(0, 0, 2, 2)
        samples = [corners_to_box(5, 5, 6, 6), gt, gt]
        v, i = best_of_k(samples, gt, fiou, maximize=True)
        assert v == 1.0 and i == 1
        with pytest.raises(ContractError):
            best_of_k([], gt, fiou)


class TestVectorisedErrors:
    def test_ego_errors_match_scalar(self):
        rng = np.random.default_rng(2)
        xy = rng.normal(size=(4, 3, 6, 2))
        gt = rng.normal(size=(4, 6, 2))
        err = ego_errors(xy, gt)
        for n in range(4):
            for j in range(3):
                a, f = ade_fde_scalar(xy[n, j], gt[n])
                assert err.ade[n, j] == pytest.approx(a, abs=1e-12)
                assert err.fde[n, j] == pytest.approx(f, abs=1e-12)

    def test_box_errors_skip_invisible_steps(self):
        rng = np.random.default_rng(3)
        gt = np.concatenate([rng.uniform(100, 900, (3, 5, 2)), rng.uniform(20, 80, (3, 5, 2))], -1)
        pred = gt[:, None] + rng.normal(scale=5, size=(3, 2, 5, 4))
        mask = np.ones((3, 5), dtype=bool)
        mask[1, 3:] = False  # left the image
        mask[2, :] = False  # never visible
        gt_nan = np.where(mask[..., None], gt, np.nan)
        err = box_errors(pred, gt_nan, mask)
        a0, f0 = ade_fde_scalar(pred[0, 1, :, :2], gt[0, :, :2])
        assert err.ade[0, 1] == pytest.approx(a0, abs=1e-12)
        assert err.fde[0, 1] == pytest.approx(f0, abs=1e-12)
        a1, _ = ade_fde_scalar(pred[1, 0, :3, :2], gt[1, :3, :2])
        assert err.ade[1, 0] == pytest.approx(a1, abs=1e-12)
        assert np.isnan(err.fde[1]).all() and np.isnan(err.fiou[1]).all()
        assert np.isnan(err.ade[2]).all()
        assert err.fiou[0, 0] == pytest.approx(iou_scalar(pred[0, 0, -1], gt[0, -1]), abs=1e-12)
