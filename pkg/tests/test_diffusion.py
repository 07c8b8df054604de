import numpy as np
import pytest
import torch

from dits.data import Dataset, normalize
from dits.diffusion import (ClampSpec, PairDiffusionModel, SamplerParams,
                            WindowDiffusionModel, block_size, denoise_step,
                            forward_sample, guided_epsilon, make_schedule,
                            sample_window, sample_windows, window_reward,
                            window_state, windows_to_transitions)

from helpers import OracleWindowDenoiser, fit_chain_diffuser, traj_1d


class ToyDenoiser:
    """Deterministic elementwise stub with distinct cond/uncond responses."""

    def epsilon(self, x, y, null_mask, k):
        x = np.atleast_2d(x)
        y = np.asarray(y, dtype=np.float64).reshape(-1, 1)
        null = np.asarray(null_mask, dtype=bool).reshape(-1, 1)
        k_arr = np.asarray(k, dtype=np.float64).reshape(-1, 1) \
            if not np.isscalar(k) else float(k)
        base = np.sin(3.0 * x) + 0.1 * k_arr
        cond = np.cos(2.0 * x + y)
        uncond = 0.7 * np.cos(5.0 * x)
        return (base + np.where(null, uncond, cond)).astype(np.float64)


class TestSchedule:
    def test_k1_degenerate(self):
        sched = make_schedule(1, "cosine")
        assert sched.K == 1
        assert sched.alphabar[0] == pytest.approx(sched.alpha[0])

    def test_cosine_monotone_and_endpoint(self):
        sched = make_schedule(200, "cosine")
        assert np.all(np.diff(sched.alphabar) < 0)
        assert sched.alphabar[-1] < 0.01
        assert np.all((sched.alpha > 0) & (sched.alpha < 1))

    def test_linear_satisfies_invariants(self):
        lin = make_schedule(200, "linear")
        cos = make_schedule(200, "cosine")
        assert np.all(np.diff(lin.alphabar) < 0)
        assert np.all((lin.alpha > 0) & (lin.alpha < 1))
        assert lin.alphabar[-1] < 0.01
        assert not np.allclose(lin.alphabar, cos.alphabar)

    def test_invalid_args(self):
        with pytest.raises(ValueError):
            make_schedule(0)
        with pytest.raises(ValueError):
            make_schedule(10, "quadratic")

    def test_posterior_variance_zero_at_k1(self):
        sched = make_schedule(16)
        assert sched.posterior_variance(1) == 0.0
        assert sched.posterior_variance(5) > 0.0


class TestForwardSample:
    def test_no_noise_limit(self):
        sched = make_schedule(200, "cosine")
        x0 = np.ones(4)
        out = forward_sample(x0, 1, sched, np.zeros(4))
        assert np.allclose(out, np.sqrt(sched.alphabar[0]) * x0)
        assert np.allclose(out, x0, atol=1e-3)

    def test_zero_signal(self):
        sched = make_schedule(50)
        noise = np.random.default_rng(0).standard_normal(6)
        out = forward_sample(np.zeros(6), 20, sched, noise)
        assert np.allclose(out, np.sqrt(1 - sched.alphabar[19]) * noise)

    def test_k_out_of_range(self):
        sched = make_schedule(10)
        with pytest.raises(ValueError):
            forward_sample(np.zeros(2), 0, sched, np.zeros(2))
        with pytest.raises(ValueError):
            forward_sample(np.zeros(2), 11, sched, np.zeros(2))

    @pytest.mark.parametrize("k", [1, 25, 50])
    def test_monte_carlo_marginals(self, k):
        sched = make_schedule(50, "cosine")
        rng = np.random.default_rng(123)
        x0 = 0.8
        n = 10_000
        samples = forward_sample(x0, k, sched, rng.standard_normal(n))
        abar = sched.alphabar[k - 1]
        se_mean = np.sqrt((1 - abar) / n)
        assert abs(samples.mean() - np.sqrt(abar) * x0) <= 3 * se_mean + 1e-12
        se_var = (1 - abar) * np.sqrt(2.0 / (n - 1))
        assert abs(samples.var() - (1 - abar)) <= 3 * se_var


class TestGuidedEpsilon:
    def test_omega_zero_equals_unconditional(self):
        toy = ToyDenoiser()
        rng = np.random.default_rng(1)
        x = rng.standard_normal((5, 8))
        out = guided_epsilon(toy, x, 0.4, 3, omega=0.0)
        direct = toy.epsilon(x, np.full(5, 0.4), np.ones(5, dtype=bool), 3)
        assert np.array_equal(out, direct)

    def test_omega_one_equals_conditional(self):
        toy = ToyDenoiser()
        rng = np.random.default_rng(2)
        x = rng.standard_normal((5, 8))
        out = guided_epsilon(toy, x, 0.4, 3, omega=1.0)
        direct = toy.epsilon(x, np.full(5, 0.4), np.zeros(5, dtype=bool), 3)
        assert np.array_equal(out, direct)

    def test_omega_two_arithmetic_oracle(self):
        toy = ToyDenoiser()
        rng = np.random.default_rng(3)
        x = rng.standard_normal((4, 6))
        out = guided_epsilon(toy, x, 0.25, 7, omega=2.0)
        cond = toy.epsilon(x, np.full(4, 0.25), np.zeros(4, dtype=bool), 7)
        uncond = toy.epsilon(x, np.full(4, 0.25), np.ones(4, dtype=bool), 7)
        assert np.max(np.abs(out - (2 * cond - uncond))) < 1e-9


class TestDenoiseStep:
    def test_final_step_deterministic(self):
        sched = make_schedule(8)
        x = np.random.default_rng(0).standard_normal((1, 4)) \
            .astype(np.float32)
        eps = np.random.default_rng(1).standard_normal((1, 4)) \
            .astype(np.float32)
        a = denoise_step(x, eps, 1, sched, 0.5,
                         np.random.default_rng(2))
        b = denoise_step(x, eps, 1, sched, 0.5,
                         np.random.default_rng(99))
        assert np.array_equal(a, b)

    def test_alpha_temp_zero_deterministic(self):
        sched = make_schedule(8)
        x = np.ones((1, 3), dtype=np.float32)
        eps = np.ones((1, 3), dtype=np.float32)
        a = denoise_step(x, eps, 5, sched, 0.0, np.random.default_rng(0))
        b = denoise_step(x, eps, 5, sched, 0.0, np.random.default_rng(1))
        assert np.array_equal(a, b)

    def test_hand_computed_mean_formula(self):
        sched = make_schedule(4, "cosine")
        k = 3
        x = np.array([[0.37]], dtype=np.float32)
        eps = np.array([[-0.61]], dtype=np.float32)
        out = denoise_step(x, eps, k, sched, 0.0, np.random.default_rng(0))
        beta = sched.beta[k - 1]
        abar = sched.alphabar[k - 1]
        expected = (np.float64(np.float32(0.37))
                    - beta / np.sqrt(1 - abar)
                    * np.float64(np.float32(-0.61))) \
            / np.sqrt(sched.alpha[k - 1])
        assert abs(float(out[0, 0]) - expected) < 1e-9

    def test_noise_term_uses_posterior_variance(self):
        sched = make_schedule(8)
        k, alpha_temp = 5, 0.5
        x = np.zeros((1, 2), dtype=np.float32)
        eps = np.zeros((1, 2), dtype=np.float32)
        out = denoise_step(x, eps, k, sched, alpha_temp,
                           np.random.default_rng(7))
        z = np.random.default_rng(7).standard_normal((1, 2))
        expected = np.sqrt(alpha_temp * sched.posterior_variance(k)) * z
        assert np.allclose(out, expected, atol=1e-7)

    def test_k_out_of_range(self):
        sched = make_schedule(4)
        with pytest.raises(ValueError):
            denoise_step(np.zeros((1, 2)), np.zeros((1, 2)), 5, sched, 0.5,
                         np.random.default_rng(0))


class TestSampling:
    def _oracle(self, horizon=4, state_width=1, K=32):
        sched = make_schedule(K, "cosine")
        rng = np.random.default_rng(42)
        x0 = rng.standard_normal(horizon * block_size(state_width)) \
            .astype(np.float64)
        oracle = OracleWindowDenoiser(horizon, state_width, sched,
                                      lambda row: x0)
        return oracle, sched, x0

    def test_oracle_chain_recovers_x0(self):
        # DDPM mean-formula consistency: deterministic chain with the true
        # noise recovers the target exactly at the last step
        oracle, sched, x0 = self._oracle()
        out = sample_window(oracle, sched, ClampSpec(),
                            SamplerParams(omega=1.0, alpha_temp=0.0,
                                          target_y=0.5),
                            np.random.default_rng(0), oracle.horizon,
                            oracle.state_width)
        assert np.max(np.abs(out - x0)) < 1e-6

    def test_full_clamping_returns_clamps(self):
        oracle, sched, _ = self._oracle()
        clamp = ClampSpec()
        values = np.random.default_rng(5).standard_normal((4, 1))
        for b in range(4):
            clamp.add_state(b, values[b])
            clamp.add_reward(b, float(b) / 7.0)
        out = sample_window(oracle, sched, clamp,
                            SamplerParams(omega=1.3, alpha_temp=0.5,
                                          target_y=0.5),
                            np.random.default_rng(0), 4, 1)
        for b in range(4):
            assert np.array_equal(window_state(out, b, 1),
                                  values[b].astype(np.float32))
            assert window_reward(out, b, 1) == np.float32(b / 7.0)

    def test_same_rng_same_output(self):
        oracle, sched, _ = self._oracle()
        params = SamplerParams(omega=1.5, alpha_temp=0.5, target_y=0.3)
        a = sample_window(oracle, sched, ClampSpec(), params,
                          np.random.default_rng(11), 4, 1)
        b = sample_window(oracle, sched, ClampSpec(), params,
                          np.random.default_rng(11), 4, 1)
        assert np.array_equal(a, b)

    def test_clamp_index_out_of_range(self):
        oracle, sched, _ = self._oracle()
        clamp = ClampSpec().add_state(4, np.zeros(1))
        with pytest.raises(ValueError, match="clamp block"):
            sample_window(oracle, sched, clamp, SamplerParams(),
                          np.random.default_rng(0), 4, 1)

    def test_batched_rows_match_rng_streams(self):
        oracle, sched, _ = self._oracle()
        params = SamplerParams(omega=1.0, alpha_temp=0.4, target_y=0.3)
        batch = sample_windows(oracle, sched, [ClampSpec(), ClampSpec()],
                               params,
                               [np.random.default_rng(1),
                                np.random.default_rng(2)], 4, 1)
        single = sample_window(oracle, sched, ClampSpec(), params,
                               np.random.default_rng(2), 4, 1)
        assert np.array_equal(batch[1], single)


class TestTraining:
    def test_overfit_single_window(self):
        traj = traj_1d(np.linspace(0.0, 1.0, 9),
                       rewards=np.linspace(-1, 1, 8))
        ds = normalize(Dataset([traj]), horizon=8, gamma=0.99)
        model = WindowDiffusionModel(
            horizon=8, diffusion_steps=16, width=32, n_blocks=2, emb_dim=32,
            lr=1e-3, batch_size=16, steps=5000, seed=0).fit(ds)
        assert np.mean(model.loss_history_[-100:]) < 0.05

    def test_horizon_too_long_raises(self):
        ds = normalize(Dataset([traj_1d([0.0, 1.0, 2.0])]), horizon=1,
                       gamma=0.9)
        model = WindowDiffusionModel(horizon=10, steps=10)
        with pytest.raises(ValueError, match="horizon"):
            model.fit(ds)

    def test_unnormalized_dataset_rejected(self):
        ds = Dataset([traj_1d(np.arange(10.0))])
        with pytest.raises(ValueError, match="normalized"):
            WindowDiffusionModel(horizon=4, steps=10).fit(ds)

    def test_p_drop_one_is_unconditional_by_construction(self):
        traj = traj_1d(np.linspace(0.0, 1.0, 12))
        ds = normalize(Dataset([traj]), horizon=4, gamma=0.9)
        model = WindowDiffusionModel(horizon=4, diffusion_steps=8, width=16,
                                     n_blocks=1, emb_dim=16, p_drop=1.0,
                                     steps=50, seed=0).fit(ds)
        x = np.random.default_rng(0).standard_normal((6, 8)) \
            .astype(np.float32)
        for y in (0.0, 0.33, 1.0):
            cond = model.epsilon(x, y, np.zeros(6, dtype=bool), 3)
            uncond = model.epsilon(x, 0.0, np.ones(6, dtype=bool), 3)
            assert np.max(np.abs(cond - uncond)) < 1e-6

    def test_chain_expert_rewards_reproduced(self, chain_diffuser,
                                             chain_expert_norm):
        stats = chain_expert_norm.norm_stats
        params = SamplerParams(omega=1.2, alpha_temp=0.5, target_y=1.0)
        rngs = [np.random.default_rng(s) for s in range(16)]
        clamps = [ClampSpec() for _ in range(16)]
        out = chain_diffuser.sample(clamps, params, rngs)
        rewards = np.concatenate(
            [stats.denormalize_rewards(window_reward(out, b, 1))
             for b in range(chain_diffuser.horizon)])
        assert abs(rewards.mean() - 1.0) < 0.2


class TestPairLayout:
    def test_window_matrix_shape_and_content(self):
        traj = traj_1d([0.0, 1.0, 2.0, 3.0], rewards=[0.1, 0.2, 0.3])
        ds = normalize(Dataset([traj]), horizon=2, gamma=0.9,
                       normalize_rewards=False)
        model = PairDiffusionModel(horizon=2, steps=1)
        model.state_dim_ = 1
        windows, ys = model._windows(ds)
        assert windows.shape == (2, 2 * 3)
        stats = ds.norm_stats
        s = stats.normalize_states(np.array([[0.], [1.], [2.], [3.]]))
        # first window blocks: (s0, s1, r0), (s1, s2, r1)
        expected = [s[0, 0], s[1, 0], 0.1, s[1, 0], s[2, 0], 0.2]
        assert np.allclose(windows[0], expected, atol=1e-6)

    def test_impute_clamps_pin_both_states(self):
        model = PairDiffusionModel(horizon=4, steps=1)
        model.state_dim_ = 2
        clamp = model.impute_clamps(np.array([1.0, 2.0]),
                                    np.array([3.0, 4.0]))
        x = np.zeros(4 * block_size(4), dtype=np.float32)
        clamp.apply(x, 4, 4)
        assert np.allclose(x[:4], [1.0, 2.0, 3.0, 4.0])

    def test_windows_to_transitions(self):
        w = np.arange(8, dtype=np.float32)[None, :]  # H=4, m=1 blocks (s, r)
        rows = windows_to_transitions(w, 1, 4)
        assert rows.shape == (3, 3)
        assert np.allclose(rows[0], [0.0, 1.0, 2.0])
        assert np.allclose(rows[2], [4.0, 5.0, 6.0])
