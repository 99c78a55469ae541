import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from egoforecast import ndtensor as nd
from egoforecast.egomotion import (
    DT,
    EGO_SCALE,
    HORIZON,
    T_OBS,
    Pose2D,
    const_vel_ego,
    dead_reckon,
    dead_reckon_batch,
    dead_reckon_poses,
    ego_forward,
    ego_loss,
    encode_ego,
    init_ego_weights,
    rotation,
    sample_ego_modes,
)
from egoforecast.ndtensor import ContractError
from egoforecast.neural import named_parameters
from egoforecast.synthdata import ScenarioConfig, generate_scene


def reckon_scalar(odom, dt=DT):
    """Unicycle with rotate-then-advance steps, scalar trigonometry."""
    x = y = th = 0.0
    out = []
    for v, w in odom:
        th += w * dt
        x += v * dt * math.cos(th)
        y += v * dt * math.sin(th)
        out.append((x, y))
    return np.array(out)


class TestDeadReckoning:
    def test_straight_line_exact(self):
        odom = np.tile([5.0, 0.0], (20, 1))
        xy = dead_reckon(odom)
        want = np.stack([np.arange(1, 21) * 0.5, np.zeros(20)], -1)
        np.testing.assert_allclose(xy, want, rtol=0, atol=1e-12)

    def test_full_revolution_closes(self):
        n = 100
        w = 2 * math.pi / (n * DT)
        xy = dead_reckon(np.tile([3.0, w], (n, 1)))
        assert np.linalg.norm(xy[-1]) < 1e-9

    def test_quarter_turn_on_circle(self):
        n = 40
        w = (math.pi / 2) / (n * DT)
        Rs, Ts = dead_reckon_poses(np.tile([2.0, w], (n, 1)))
        assert Pose2D(Rs[-1], Ts[-1]).yaw == pytest.approx(math.pi / 2, abs=1e-12)

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=30, deadline=None)
    def test_matches_scalar_oracle_and_batch(self, seed):
        rng = np.random.default_rng(seed)
        odom = np.stack([rng.uniform(0, 15, 25), rng.uniform(-0.6, 0.6, 25)], -1)
        np.testing.assert_allclose(dead_reckon(odom), reckon_scalar(odom), rtol=0, atol=1e-11)
        np.testing.assert_allclose(dead_reckon_batch(odom), reckon_scalar(odom), rtol=0, atol=1e-11)

    def test_rotations_stay_orthonormal(self):
        rng = np.random.default_rng(2)
        Rs, _ = dead_reckon_poses(np.stack([rng.uniform(0, 10, 500), rng.uniform(-0.6, 0.6, 500)], -1))
        for R in Rs[::50]:
            np.testing.assert_allclose(R.T @ R, np.eye(2), rtol=0, atol=1e-10)
            assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-10)

    def test_reconstructs_generator_poses(self):
        rng = np.random.default_rng(5)
        for kind in ("ego-straight", "ego-left-turn", "ego-right-turn", "ego-stop"):
            s = generate_scene(ScenarioConfig(ego_kind=kind, target_kind="leading"), rng, "x")
            Rs, Ts = dead_reckon_poses(s.odom_clean[1:], s.pose(0))
            np.testing.assert_allclose(Ts, s.ego_xy[1:], rtol=0, atol=1e-9)

    def test_non_finite_odometry_rejected(self):
        with pytest.raises(ContractError):
            dead_reckon(np.array([[1.0, np.nan]]))

    def test_split_reckoning_composes(self):
        rng = np.random.default_rng(4)
        odom = np.stack([rng.uniform(0, 12, 30), rng.uniform(-0.5, 0.5, 30)], -1)
        Rs, Ts = dead_reckon_poses(odom)
        Ra, Ta = dead_reckon_poses(odom[:12])
        _, Tb = dead_reckon_poses(odom[12:], Pose2D(Ra[-1], Ta[-1]))
        np.testing.assert_allclose(Tb, Ts[12:], rtol=0, atol=1e-10)

    def test_path_length_bounds_displacement(self):
        rng = np.random.default_rng(5)
        odom = np.stack([rng.uniform(0, 12, 20), rng.uniform(-0.5, 0.5, 20)], -1)
        assert np.linalg.norm(dead_reckon(odom)[-1]) < np.sum(odom[:, 0] * DT)
        odom[:, 1] = 0.0
        assert np.linalg.norm(dead_reckon(odom)[-1]) == pytest.approx(np.sum(odom[:, 0] * DT), abs=1e-12)

    def test_zero_speed_stays_put(self):
        Rs, Ts = dead_reckon_poses(np.tile([0.0, 0.3], (10, 1)))
        assert (Ts == 0).all()
        assert Pose2D(Rs[-1], Ts[-1]).yaw == pytest.approx(0.3, abs=1e-12)

    def test_rotation_composition(self):
        np.testing.assert_allclose(rotation(0.3) @ rotation(0.4), rotation(0.7), rtol=0, atol=1e-15)


class TestEgoNetwork:
    def test_shapes_and_horizon(self):
        w = init_ego_weights(np.random.default_rng(0), hidden=8, embed=4)
        heads = ego_forward(np.zeros((3, T_OBS, 2)), w)
        assert len(heads) == HORIZON and heads[0].value.shape == (3, 5)

    def test_wrong_observation_length(self):
        w = init_ego_weights(np.random.default_rng(0), hidden=8, embed=4)
        with pytest.raises(ContractError):
            encode_ego(np.zeros((1, T_OBS - 1, 2)), w)

    def test_two_step_loss_gradients(self):
        rng = np.random.default_rng(3)
        w = init_ego_weights(rng, hidden=4, embed=3)
        past = rng.normal(size=(2, T_OBS, 2))
        fut = rng.normal(size=(2, 2, 2))
        params = list(named_parameters(w).values())
        for kind in ("nll", "mse"):
            err = nd.finite_diff_params(lambda: ego_loss(ego_forward(past, w, horizon=2), fut, kind), params)
            assert err < 1e-4, kind

    def test_const_vel_repeats_last(self):
        past = np.array([[1.0, 0.1], [2.0, -0.2]])
        out = const_vel_ego(past, 4)
        np.testing.assert_array_equal(out, np.tile([2.0, -0.2], (4, 1)))


class TestModeSampling:
    def test_mode_zero_is_fused_mean(self):
        w = init_ego_weights(np.random.default_rng(0), hidden=8, embed=4)
        past = np.tile([8.0, 0.1], (2, T_OBS, 1))
        fc = sample_ego_modes(past, w, k=5, n_dropout=4, dropout_rate=0.2, rng=np.random.default_rng(1))
        np.testing.assert_array_equal(fc.modes[:, 0], fc.mean)
        assert fc.modes.shape == (2, 5, HORIZON, 2)

    def test_zero_dropout_has_zero_epistemic(self):
        w = init_ego_weights(np.random.default_rng(0), hidden=8, embed=4)
        past = np.tile([8.0, 0.1], (2, T_OBS, 1))
        fc = sample_ego_modes(past, w, k=3, n_dropout=6, dropout_rate=0.0, rng=np.random.default_rng(1))
        assert (fc.epistemic == 0.0).all()
        fc1 = sample_ego_modes(past, w, k=3, n_dropout=1, dropout_rate=0.0, rng=np.random.default_rng(1))
        assert (fc1.epistemic == 0.0).all()

    def test_shared_draw_keeps_standardized_offset_constant(self):
        w = init_ego_weights(np.random.default_rng(0), hidden=8, embed=4)
        past = np.tile([8.0, 0.1], (1, T_OBS, 1))
        fc = sample_ego_modes(past, w, k=4, n_dropout=1, rng=np.random.default_rng(2), temporal="shared")
        z1 = (fc.modes[0, 1:, :, 0] - fc.mean[0, :, 0]) / np.sqrt(fc.variance[0, :, 0])
        np.testing.assert_allclose(z1, np.repeat(z1[:, :1], HORIZON, axis=1), rtol=0, atol=1e-9)

    def test_without_aleatoric_and_dropout_modes_collapse(self):
        w = init_ego_weights(np.random.default_rng(0), hidden=8, embed=4)
        past = np.tile([8.0, 0.1], (1, T_OBS, 1))
        fc = sample_ego_modes(past, w, k=3, n_dropout=1, rng=np.random.default_rng(2), aleatoric=False)
        for i in range(3):
            np.testing.assert_array_equal(fc.modes[0, i], fc.mean[0])

    def test_physical_units(self):
        w = init_ego_weights(np.random.default_rng(0), hidden=8, embed=4)
        past = np.tile([8.0, 0.1], (1, T_OBS, 1))
        fc = sample_ego_modes(past, w, k=1, n_dropout=1, rng=np.random.default_rng(2))
        heads = ego_forward(past / EGO_SCALE, w)
        np.testing.assert_allclose(fc.mean[0, 0], heads[0].value[0, :2] * EGO_SCALE, rtol=0, atol=1e-14)
