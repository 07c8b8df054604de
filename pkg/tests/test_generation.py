import numpy as np
import pytest

from dits.data import normalize
from dits.diffusion import block_size, make_schedule
from dits.envs import Chain1D, state_only
from dits.generation import (GenerationConfig, HistoryQueue, generate_batch,
                             generate_trajectory, history_clamps)

from helpers import OracleWindowDenoiser


class TestHistoryQueue:
    def test_bounded_fifo(self):
        q = HistoryQueue(3)
        for v in range(5):
            q.push(np.array([float(v)]))
        assert len(q) == 3
        assert [s[0] for s in q.padded()] == [2.0, 3.0, 4.0]

    def test_left_padding_repeats_oldest(self):
        q = HistoryQueue(4)
        q.push(np.array([7.0]))
        q.push(np.array([8.0]))
        assert [s[0] for s in q.padded()] == [7.0, 7.0, 7.0, 8.0]

    def test_invalid_length(self):
        with pytest.raises(ValueError):
            HistoryQueue(0)

    def test_clamps_cover_leading_state_slots_only(self):
        q = HistoryQueue(2)
        q.push(np.array([1.0]))
        q.push(np.array([2.0]))
        spec = history_clamps(q)
        x = np.full(4 * block_size(1), -9.0, dtype=np.float32)
        spec.apply(x, 1, 4)
        assert x[0] == 1.0 and x[2] == 2.0
        # reward slots and future blocks stay free
        assert x[1] == -9.0 and x[3] == -9.0 and np.all(x[4:] == -9.0)


class TestGenerationConfig:
    def test_context_bounds(self):
        with pytest.raises(ValueError):
            GenerationConfig(context=0, horizon=8)
        with pytest.raises(ValueError):
            GenerationConfig(context=8, horizon=8)


class _ExpertOracleBundle:
    """Oracle bundle for chain1d: the denoiser pulls every window toward the
    expert continuation of the clamped current state, with sentinel rewards
    distinguishable from the true environment reward."""

    SENTINEL_REWARD = 0.5

    def __init__(self, stats, context, horizon):
        self.stats = stats
        self.context = context
        schedule = make_schedule(24, "cosine")
        step_norm = 1.0 / float(stats.state_std[0])
        reward_norm = float(stats.normalize_rewards(
            np.float32(self.SENTINEL_REWARD)))

        def target(row):
            s_now = row[(context - 1) * 2]
            x0 = np.empty_like(row)
            for b in range(horizon):
                x0[2 * b] = s_now + (b - (context - 1)) * step_norm
                x0[2 * b + 1] = reward_norm
            return x0

        self.diffuser = OracleWindowDenoiser(horizon, 1, schedule, target)

    def predict_action(self, s, s_next):
        return (np.atleast_2d(s_next) - np.atleast_2d(s)).astype(np.float32)


@pytest.fixture(scope="module")
def oracle_bundle(chain_expert_norm):
    return _ExpertOracleBundle(chain_expert_norm.norm_stats, context=2,
                               horizon=6)


def _config(**kw):
    base = dict(context=2, horizon=6, omega=1.0, alpha_temp=0.0,
                target_y=0.9, n_traj=3, seed=0)
    base.update(kw)
    return GenerationConfig(**base)


class TestGenerateTrajectory:
    def test_oracle_denoiser_monotone_positions(self, oracle_bundle):
        env = state_only(Chain1D())
        traj = generate_trajectory(env, oracle_bundle, _config(),
                                   np.random.default_rng(0))
        positions = traj.states[:, 0]
        assert np.all(np.diff(positions) > 0.5)
        assert len(traj) == 30  # chain horizon

    def test_rewards_are_diffuser_imputed(self, oracle_bundle):
        # true chain reward would be ~1 per step; the oracle imputes 0.5
        env = state_only(Chain1D())
        traj = generate_trajectory(env, oracle_bundle, _config(),
                                   np.random.default_rng(0))
        assert np.allclose(traj.rewards, 0.5, atol=0.05)

    def test_max_steps_one(self, oracle_bundle):
        env = state_only(Chain1D())
        traj = generate_trajectory(env, oracle_bundle,
                                   _config(max_steps=1),
                                   np.random.default_rng(0))
        assert len(traj) == 1

    def test_audit_counter_stays_zero(self, oracle_bundle):
        env = state_only(Chain1D())
        generate_trajectory(env, oracle_bundle, _config(),
                            np.random.default_rng(0))
        assert env.reward_query_count == 0

    def test_chaining_and_source(self, oracle_bundle):
        env = state_only(Chain1D())
        traj = generate_trajectory(env, oracle_bundle, _config(),
                                   np.random.default_rng(0))
        assert traj.source == "generated"
        for i in range(len(traj) - 1):
            assert np.array_equal(traj[i].s_next, traj[i + 1].s)

    def test_horizon_mismatch_rejected(self, oracle_bundle):
        env = state_only(Chain1D())
        with pytest.raises(ValueError, match="horizon"):
            generate_trajectory(env, oracle_bundle, _config(horizon=8),
                                np.random.default_rng(0))


class TestGenerateBatch:
    def test_empty_batch(self, oracle_bundle):
        out = generate_batch(lambda: state_only(Chain1D()), oracle_bundle,
                             _config(n_traj=0))
        assert len(out) == 0
        assert out.state_dim == 1

    def test_deterministic_given_config(self, oracle_bundle):
        factory = lambda: state_only(Chain1D())  # noqa: E731
        a = generate_batch(factory, oracle_bundle, _config())
        b = generate_batch(factory, oracle_bundle, _config())
        assert a == b
