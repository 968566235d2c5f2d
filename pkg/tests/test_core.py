import collections

import numpy as np
import pytest

from planarloco import core
from planarloco.core import (Command, NoiseModel, Observation, ObservationHistory,
                             RobotState, RunConfig, build_observation,
                             config_from_text, config_to_text, push_history,
                             rng_stream)


def _state(pitch=0.0, **kw):
    return RobotState(base_z=0.8, base_pitch=pitch, **kw)


def test_layout_checksum_pinned():
    assert core.obs_layout_checksum() == core.OBS_LAYOUT_CHECKSUM
    RunConfig()  # asserts at construction


def test_projected_gravity_upright():
    obs = build_observation(_state(0.0), Command(0.0), np.zeros(8),
                            NoiseModel(enabled=False), rng_stream(0, "noise"))
    assert np.allclose(obs.projected_gravity, [0.0, -1.0])


def test_projected_gravity_quarter_turn():
    obs = build_observation(_state(np.pi / 2), Command(0.0), np.zeros(8),
                            NoiseModel(enabled=False), rng_stream(0, "noise"))
    assert np.allclose(obs.projected_gravity, [-1.0, 0.0], atol=1e-12)


def test_observation_dimension_and_layout():
    obs = build_observation(_state(), Command(1.5), np.arange(8.0),
                            NoiseModel(enabled=False), rng_stream(0, "noise"))
    v = obs.vector()
    assert v.shape == (29,)
    assert v[28] == 1.5
    assert np.allclose(v[18:26], np.arange(8.0))
    back = Observation.from_vector(v)
    assert np.allclose(back.vector(), v)


def test_noise_bound_dof_position():
    st = _state(joint_pos=np.linspace(-0.5, 0.5, 8))
    rng = rng_stream(7, "noise")
    noise = NoiseModel(enabled=True, scale=1.0)
    for _ in range(200):
        obs = build_observation(st, Command(0.0), np.zeros(8), noise, rng)
        assert np.all(np.abs(obs.joint_pos - st.joint_pos) <= 0.04 + 1e-12)
        assert abs(obs.base_pitch - st.base_pitch) <= 0.40 + 1e-12
        assert abs(obs.base_pitch_rate - st.base_pitch_rate) <= 1.00 + 1e-12


def test_invalid_state_rejected():
    st = _state()
    st.joint_pos = np.array([np.nan] + [0.0] * 7)
    with pytest.raises(core.InvalidStateError):
        build_observation(st, Command(0.0), np.zeros(8), NoiseModel(), rng_stream(0, "noise"))


def test_history_prefill():
    obs = build_observation(_state(), Command(0.3), np.zeros(8),
                            NoiseModel(), rng_stream(0, "noise"))
    hist = ObservationHistory.fresh(obs, 10)
    assert hist.window.shape == (10, 29)
    assert np.all(hist.window == obs.vector())


def test_push_history_shift():
    a = Observation.from_vector(np.full(29, 1.0))
    b = Observation.from_vector(np.full(29, 2.0))
    c = Observation.from_vector(np.full(29, 3.0))
    hist = ObservationHistory(window=np.stack([a.vector(), b.vector()]))
    out = push_history(hist, c)
    assert np.all(out.window[0] == 3.0)
    assert np.all(out.window[1] == 1.0)


def test_push_history_matches_deque_oracle():
    rng = np.random.default_rng(0)
    h = 6
    first = Observation.from_vector(rng.standard_normal(29))
    hist = ObservationHistory.fresh(first, h)
    oracle = collections.deque([first.vector()] * h, maxlen=h)
    for _ in range(4 * h):
        obs = Observation.from_vector(rng.standard_normal(29))
        hist = push_history(hist, obs)
        oracle.appendleft(obs.vector())
        assert np.allclose(hist.window, np.stack(list(oracle)))


def test_rng_streams_independent_and_deterministic():
    a1 = rng_stream(5, "env", 0).standard_normal(4)
    a2 = rng_stream(5, "env", 0).standard_normal(4)
    b = rng_stream(5, "env", 1).standard_normal(4)
    c = rng_stream(5, "policy", 0).standard_normal(4)
    assert np.all(a1 == a2)
    assert not np.allclose(a1, b)
    assert not np.allclose(a1, c)


def test_config_round_trip():
    cfg = RunConfig(seed=11)
    cfg.ppo.lr = 3e-4
    cfg.rewards.sigma_lin_sq = 0.5
    cfg.noise.enabled = True
    text = config_to_text(cfg)
    cfg2 = config_from_text(text)
    assert cfg2.seed == 11
    assert cfg2.ppo.lr == 3e-4
    assert cfg2.rewards.sigma_lin_sq == 0.5
    assert cfg2.noise.enabled is True
    assert config_to_text(cfg2) == text


def test_config_defaults_follow_hyperparameter_tables():
    cfg = RunConfig()
    # PPO table
    assert cfg.gamma == 0.99
    assert cfg.ppo.gae_lambda == 0.95
    assert cfg.ppo.epochs == 5
    assert cfg.ppo.minibatches == 4
    assert cfg.ppo.entropy_coef == 0.005
    assert cfg.ppo.value_coef == 1.0
    assert cfg.ppo.clip == 0.2
    assert cfg.ppo.lr == 2e-4
    assert cfg.ppo.horizon == 24
    # DQN table
    assert cfg.dqn.batch_size == 128
    assert cfg.dqn.lr == 1e-4
    assert cfg.dqn.replay_capacity == 2_000_000
    assert cfg.dqn.switch_coeff == 0.001
    assert cfg.dqn.target_update == 50
    assert cfg.dqn.eps_init == 0.1
    assert cfg.dqn.eps_min == 0.001
    assert cfg.dqn.eps_decay == 0.999
    # discriminator table
    assert cfg.disc.replay_capacity == 500_000
    assert cfg.disc.expert_capacity == 200_000
    assert cfg.disc.expert_fetch == 512
    assert cfg.disc.batch_size == 4096
    assert cfg.disc.lr == 2e-5
    assert cfg.disc.grad_penalty == 1.0
    assert cfg.disc.lamda == 1.0
    # VAE table
    assert cfg.vae.kl_coeff == 1.0
    assert cfg.vae.lr == 1e-4
    # noise table
    n = cfg.noise
    assert (n.dof_pos, n.dof_vel, n.ang_vel, n.imu, n.gravity, n.pd_gains) == \
        (0.04, 0.30, 1.00, 0.40, 0.10, 0.20)
    # control timing: 1200 steps = 12 s at 100 Hz
    assert cfg.control_hz == 100
    assert cfg.episode_steps == 1200


def test_config_parse_error_reports_position():
    with pytest.raises(core.ConfigError, match="line 2"):
        config_from_text("seed = 1\nbogus.key = 3\n")
    with pytest.raises(core.ConfigError, match="line 1"):
        config_from_text("justsomething\n")


def test_config_type_checks():
    with pytest.raises(core.ConfigError):
        config_from_text("seed = not_an_int\n")
    cfg = config_from_text("ppo.num_envs = 32\nnoise.enabled = true\n")
    assert cfg.ppo.num_envs == 32
    assert cfg.noise.enabled is True
