import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from expertgrowth.controller import NominalModel, Planner, PlannerConfig
from expertgrowth.errors import ConfigError, EpisodeError
from expertgrowth.shiftenv import (
    ID_SHIFT, EnvParams, EnvState, ShiftSpec, apply_shift, clip_action, observe, read_trajectories,
    run_episode, step, target_velocity, velocity_update, write_trajectories, zero_controller,
)

NOMINAL = EnvParams()


def test_apply_shift_identity_and_single_field():
    assert apply_shift(NOMINAL, ID_SHIFT) == NOMINAL
    heavy = apply_shift(EnvParams(mass=1.0), ShiftSpec("torso_mass", 5.0))
    assert heavy.mass == 5.0
    assert dataclasses.replace(heavy, mass=1.0) == EnvParams(mass=1.0)


def test_gear_shift_scales_to_point_three():
    assert apply_shift(EnvParams(gear=1.0), ShiftSpec("gear", 0.3)).gear == pytest.approx(0.3)


def test_shift_label_roundtrip():
    for label in ("ID", "torso_mass_x5", "gear_x0.3", "gravity_x5", "friction_x2"):
        assert ShiftSpec.parse(label).label == label


@pytest.mark.parametrize("bad", ["mass_x2", "torso_mass", "gear_x-1"])
def test_bad_shift_labels(bad):
    with pytest.raises(ConfigError):
        ShiftSpec.parse(bad)


def test_invalid_params():
    with pytest.raises(ConfigError):
        EnvParams(mass=0.0)
    with pytest.raises(ConfigError):
        EnvParams(target_profile=((5, 0.3),))


def test_equilibrium_step():
    s, _ = step(EnvState(0.0, 0.0, 0), 0.0, NOMINAL)
    assert s.v == 0.0 and s.x == 0.0 and s.t == 1


def test_inverse_mass_linearity():
    kw = dict(gravity=0.0, gear=1.0, friction=0.0, damping=0.0, dt=0.05)
    dv1 = velocity_update(0.3, 0.2, 0.7, mass=1.0, **kw) - 0.2
    dv5 = velocity_update(0.3, 0.2, 0.7, mass=5.0, **kw) - 0.2
    assert dv5 == pytest.approx(dv1 / 5, rel=1e-12)


def test_step_past_horizon_raises():
    with pytest.raises(EpisodeError):
        step(EnvState(0.0, 0.0, NOMINAL.horizon), 0.0, NOMINAL)


def test_action_clamp():
    assert clip_action(1.7) == (1.0, True)
    assert clip_action(-3.0) == (-1.0, True)
    assert clip_action(0.25) == (0.25, False)


def test_target_profile_lookup():
    assert list(target_velocity(np.array([0, 49, 50, 99, 100, 150, 199, 500]), NOMINAL)) == \
        [0.3, 0.3, 0.6, 0.6, 0.3, 0.5, 0.5, 0.5]


def test_observation_determinism_and_zero_constants():
    p = dataclasses.replace(NOMINAL, obs_noise_std=0.0)
    s = EnvState(0.4, -0.1, 3)
    a = observe(s, p, np.random.default_rng(1))
    b = observe(s, p, np.random.default_rng(2))
    assert np.array_equal(a, b)
    zeros = (np.zeros((p.obs_dim, 3)), np.zeros(p.obs_dim))
    assert np.array_equal(observe(s, p, np.random.default_rng(0), zeros), np.zeros(p.obs_dim))


def test_observation_golden():
    o = observe(EnvState(0.1, 0.2, 0), NOMINAL, np.random.default_rng(0))
    assert o[:4].tolist() == [-0.024421338043852752, -0.3805142947944362, 0.46417321794779454,
                              -0.7900264550389069]
    assert float(o.sum()) == -4.23265882001585


def test_zero_action_closed_form():
    # x stays at 0 (sin 0 = 0) and v stays 0, so every step earns 1 - |0 - target| / scale
    flat = dataclasses.replace(NOMINAL, init_x_range=0.0, horizon=40, target_profile=((0, 0.0), (20, 0.05)))
    tr = run_episode(zero_controller, flat, 3)
    assert tr.episode_return == pytest.approx(20 * 1.0 + 20 * (1 - 0.05 / 0.15), abs=1e-12)


def test_run_episode_deterministic():
    p = dataclasses.replace(NOMINAL, horizon=30)
    ctrl = Planner(NominalModel.from_params(p), PlannerConfig(n_candidates=16), p)
    a, b = run_episode(ctrl, p, 11), run_episode(ctrl, p, 11)
    assert np.array_equal(a.observations, b.observations)
    assert np.array_equal(a.actions, b.actions)
    assert a.episode_return == b.episode_return


def test_nominal_episode_golden():
    ctrl = Planner(NominalModel.from_params(NOMINAL), PlannerConfig(), NOMINAL)
    assert run_episode(ctrl, NOMINAL, 0).episode_return == 140.16653483342208


def test_heavy_mass_degrades_baseline():
    ctrl = Planner(NominalModel.from_params(NOMINAL), PlannerConfig(n_candidates=64), NOMINAL)
    heavy = apply_shift(NOMINAL, ShiftSpec("torso_mass", 5.0))
    nominal = run_episode(ctrl, NOMINAL, 5).episode_return
    shifted = run_episode(ctrl, heavy, 5, ShiftSpec("torso_mass", 5.0)).episode_return
    assert shifted < nominal


def test_nonfinite_action_aborts():
    with pytest.raises(EpisodeError):
        run_episode(lambda s, h, r: float("nan"), NOMINAL, 0)


def test_trajectory_jsonl_roundtrip(tmp_path):
    p = dataclasses.replace(NOMINAL, horizon=12)
    trs = [run_episode(zero_controller, p, s) for s in (1, 2)]
    path = tmp_path / "t.jsonl"
    write_trajectories(path, trs)
    back = read_trajectories(path)
    assert len(back) == 2
    for a, b in zip(trs, back):
        assert np.array_equal(a.observations, b.observations)
        assert np.array_equal(a.states, b.states)
        assert a.episode_return == b.episode_return and a.seed == b.seed
    first = json.loads(path.read_text().splitlines()[0])
    assert first["kind"] == "episode" and first["steps"] == 12


@settings(max_examples=50, deadline=None)
@given(x=st.floats(-3, 3), v=st.floats(-2, 2), a=st.floats(-1, 1))
def test_reward_in_unit_interval(x, v, a):
    s, r = step(EnvState(x, v, 0), a, NOMINAL)
    assert 0.0 <= r <= 1.0
    assert np.isfinite(s.x) and np.isfinite(s.v)
