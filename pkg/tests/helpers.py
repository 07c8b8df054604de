"""Shared test utilities: tiny dataset builders, oracle denoisers, stub
bundles, the independent brute-force stitching oracle, and gradient-check
closures for every training loss."""

from __future__ import annotations

import numpy as np
import torch

from dits.config import DitsConfig
from dits.data import Dataset, Trajectory, window_return
from dits.diffusion import (PairDiffusionModel, TemporalResNet,
                            WindowDiffusionModel, block_size,
                            denoise_training_loss, make_schedule,
                            sample_windows)
from dits.evaluation import imitation_loss
from dits.models import bellman_loss, gaussian_nll_loss, idm_loss
from dits.nets import FunctionalView, flat_params, make_mlp


def traj_1d(positions, actions=None, rewards=None, **kwargs) -> Trajectory:
    """1-D trajectory from a position list; defaults to increment dynamics."""
    positions = np.asarray(positions, dtype=np.float32).reshape(-1, 1)
    n = len(positions) - 1
    if actions is None:
        actions = positions[1:] - positions[:-1]
    else:
        actions = np.asarray(actions, dtype=np.float32).reshape(-1, 1)
    if rewards is None:
        rewards = (positions[1:] - positions[:-1]).reshape(-1)
    return Trajectory(positions, actions,
                      np.asarray(rewards, dtype=np.float32).reshape(n),
                      **kwargs)


def reward_traj(rewards, **kwargs) -> Trajectory:
    """Trajectory with the given rewards and arbitrary consistent states."""
    rewards = np.asarray(rewards, dtype=np.float32)
    positions = np.arange(len(rewards) + 1, dtype=np.float32)
    return traj_1d(positions, rewards=rewards, **kwargs)


def tiny_config(**overrides) -> DitsConfig:
    base = dict(
        env="chain1d", tier="medium", n_offline=20, horizon=8, context=2,
        diffusion_steps=24, width=32, n_blocks=2, emb_dim=32,
        steps_diffuser=1500, steps_idm=800, steps_dynamics=400,
        steps_value=400, steps_bc=800, n_members=3, n_select=2,
        stitch_epochs=1, n_per_epoch=5, rho=0.5, eval_episodes=3,
        hidden_idm=(64, 64), hidden_dynamics=(64, 64),
        hidden_value=(64, 64), hidden_bc=(64, 64))
    base.update(overrides)
    return DitsConfig(**base)


class OracleWindowDenoiser:
    """Denoiser stub that returns the exact noise towards a target window.

    ``target_fn(x_row)`` maps the current (clamped) noisy window to its clean
    target x0; with alpha_temp=0 the reverse chain then converges to x0
    exactly, which is the DDPM mean-formula consistency property.
    """

    def __init__(self, horizon, state_width, schedule, target_fn):
        self.horizon = horizon
        self._state_width = state_width
        self.schedule_ = schedule
        self.target_fn = target_fn

    @property
    def state_width(self):
        return self._state_width

    def epsilon(self, x, y, null_mask, k):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        abar = self.schedule_.alphabar[int(np.max(k)) - 1]
        out = np.empty_like(x)
        for i in range(len(x)):
            x0 = np.asarray(self.target_fn(x[i]), dtype=np.float64)
            out[i] = (x[i] - np.sqrt(abar) * x0) / np.sqrt(1.0 - abar)
        return out

    def sample(self, clamps, params, rngs):
        single = not isinstance(rngs, (list, tuple))
        if single:
            clamps, rngs = [clamps], [rngs]
        out = sample_windows(self, self.schedule_, clamps, params, rngs,
                             self.horizon, self.state_width)
        return out[0] if single else out


class StubBundle:
    """Oracle-model bundle for stitching tests.

    value_fn(state) -> float; logp_fn(s, s_next) -> per-member log densities;
    action_fn(s, s_next) -> action; reward_fn(s, s_hat) -> reward.
    """

    def __init__(self, value_fn, logp_fn, action_fn=None, reward_fn=None):
        self.value_fn = value_fn
        self.logp_fn = logp_fn
        self.action_fn = action_fn or (lambda s, sn: np.asarray(sn) - np.asarray(s))
        self.reward_fn = reward_fn or (lambda s, sh: 1.0)
        self.refits = 0

    def state_values(self, states):
        states = np.atleast_2d(states)
        return np.asarray([self.value_fn(s) for s in states], dtype=np.float64)

    def state_value(self, s):
        return float(self.value_fn(np.asarray(s).reshape(-1)))

    def candidate_log_densities(self, s, s_next):
        return np.asarray(self.logp_fn(np.asarray(s).reshape(-1),
                                       np.asarray(s_next).reshape(-1)),
                          dtype=np.float64)

    def predict_action(self, s, s_next):
        s = np.atleast_2d(s)
        s_next = np.atleast_2d(s_next)
        out = np.stack([np.asarray(self.action_fn(a, b), dtype=np.float32)
                        .reshape(-1) for a, b in zip(s, s_next)])
        return out[0] if len(out) == 1 else out

    def impute_rewards(self, s, s_hat, params, seed):
        s = np.atleast_2d(s)
        s_hat = np.atleast_2d(s_hat)
        return np.asarray([self.reward_fn(a, b) for a, b in zip(s, s_hat)],
                          dtype=np.float32)

    def refit_value(self, dataset):
        self.refits += 1
        return self


# ---------------------------------------------------------------------------
# Independent brute-force stitching oracle (exhaustive enumeration of every
# decision, straight from the documented contract; no dits.stitching calls).
# ---------------------------------------------------------------------------

def oracle_walk(tid, dataset, bundle, rho, max_walk_len):
    trajs = dataset.trajectories
    occurrences = [(t, i) for t, traj in enumerate(trajs)
                   for i in range(len(traj.states))]
    steps = []
    host, i = tid, 0
    visited = {(host, i)}
    stitched = False
    while i < len(trajs[host]) and len(steps) < max_walk_len:
        traj = trajs[host]
        s, s_prime = traj.states[i], traj.states[i + 1]
        cands = []
        for occ in occurrences:
            if occ == (host, i + 1):
                continue
            state = trajs[occ[0]].states[occ[1]]
            if np.linalg.norm(state.astype(np.float64)
                              - s_prime.astype(np.float64)) < rho:
                cands.append(occ)
        cands.sort()
        best, best_val = None, None
        for occ in cands:
            val = bundle.state_value(trajs[occ[0]].states[occ[1]])
            if best_val is None or val > best_val:
                best, best_val = occ, val
        take = False
        if best is not None and best not in visited:
            cand_state = trajs[best[0]].states[best[1]]
            if best_val > bundle.state_value(s_prime):
                logp_c = bundle.candidate_log_densities(s, cand_state)
                logp_o = bundle.candidate_log_densities(s, s_prime)
                mean_side = np.log(np.mean(np.exp(np.asarray(logp_o, dtype=np.float64))))
                take = float(np.min(logp_c)) > float(mean_side)
        if take:
            cand_state = trajs[best[0]].states[best[1]]
            a = np.asarray(bundle.predict_action(s, cand_state),
                           dtype=np.float32).reshape(-1)
            r = float(bundle.impute_rewards(s[None], cand_state[None],
                                            None, 0)[0])
            steps.append((s, a, r, cand_state))
            stitched = True
            host, i = best
        else:
            steps.append((s, traj.actions[i], float(traj.rewards[i]), s_prime))
            i += 1
        visited.add((host, i))
    if not stitched:
        return trajs[tid]
    states = np.stack([steps[0][0]] + [st[3] for st in steps])
    terminated = (i >= len(trajs[host])) and trajs[host].terminated
    return Trajectory(states, np.stack([st[1] for st in steps]),
                      np.asarray([st[2] for st in steps], dtype=np.float32),
                      terminated=terminated, source="stitched",
                      policy=trajs[tid].policy)


def oracle_epoch(dataset, bundle, rho, p_tilde, max_walk_len, T):
    """Reference epoch with n=0 generation: stitch all, accept, sort, top-T."""
    out = []
    for tid in range(len(dataset)):
        cand = oracle_walk(tid, dataset, bundle, rho, max_walk_len)
        orig = dataset.trajectories[tid]
        if cand is orig:
            out.append(orig)
        else:
            new_sum, old_sum = cand.reward_sum(), orig.reward_sum()
            out.append(cand if new_sum > old_sum + p_tilde * abs(old_sum)
                       else orig)
    order = sorted(range(len(out)), key=lambda j: (-out[j].reward_sum(), j))
    return Dataset([out[j] for j in order[:T]],
                   state_dim=dataset.state_dim, action_dim=dataset.action_dim)


def oracle_lambda_filter(dataset, kappa_frac):
    sums = [t.reward_sum() for t in dataset]
    kappa = kappa_frac * (max(sums) - min(sums))
    lam = max(sums) - kappa
    return Dataset([t for t, s in zip(dataset.trajectories, sums) if s > lam],
                   state_dim=dataset.state_dim,
                   action_dim=dataset.action_dim)


# ---------------------------------------------------------------------------
# Gradient-check closures (<= 1k parameter instances, float64)
# ---------------------------------------------------------------------------

def _f64(*shape, seed=0):
    rng = np.random.default_rng(seed)
    return torch.from_numpy(rng.standard_normal(shape))


def idm_gradcheck_case(seed=0):
    net = make_mlp(2, (8, 8), 1, seed=seed, zero_init_final=False,
                   dtype=torch.float64)
    s, ss, a = _f64(6, 1, seed=1), _f64(6, 1, seed=2), _f64(6, 1, seed=3)
    return (lambda vec: idm_loss(FunctionalView(net, vec), s, ss, a),
            flat_params(net).double())


def dynamics_gradcheck_case(seed=0):
    net = make_mlp(1, (8, 8), 2, seed=seed, zero_init_final=False,
                   dtype=torch.float64)
    s, ss = _f64(6, 1, seed=4), _f64(6, 1, seed=5)
    return (lambda vec: gaussian_nll_loss(FunctionalView(net, vec), s, ss),
            flat_params(net).double())


def value_gradcheck_case(seed=0):
    net = make_mlp(1, (8, 8), 1, seed=seed, zero_init_final=False,
                   dtype=torch.float64)
    s, ss, r = _f64(6, 1, seed=6), _f64(6, 1, seed=7), _f64(6, seed=8)
    term = torch.zeros(6, dtype=torch.float64)
    term[-1] = 1.0
    return (lambda vec: bellman_loss(FunctionalView(net, vec), s, r, ss,
                                     term, 0.95),
            flat_params(net).double())


def bc_gradcheck_case(seed=0):
    net = make_mlp(1, (8, 8), 1, seed=seed, zero_init_final=False,
                   dtype=torch.float64)
    s, a = _f64(6, 1, seed=9), _f64(6, 1, seed=10)
    return (lambda vec: imitation_loss(FunctionalView(net, vec), s, a),
            flat_params(net).double())


def denoiser_gradcheck_case(seed=0):
    net = TemporalResNet(channels=2, width=4, n_blocks=1, emb_dim=4,
                         kernel=3, seed=seed).double()
    schedule = make_schedule(8, "cosine")
    horizon = 4
    x0 = _f64(4, horizon * 2, seed=11)
    k = torch.tensor([1, 3, 5, 8])
    noise = _f64(4, horizon * 2, seed=12)
    y = torch.tensor([0.1, 0.9, 0.5, 0.3], dtype=torch.float64)
    null = torch.tensor([False, True, False, False])
    return (lambda vec: denoise_training_loss(FunctionalView(net, vec), x0, k,
                                              noise, y, null, schedule),
            flat_params(net).double())


GRADCHECK_CASES = {
    "denoiser": denoiser_gradcheck_case,
    "idm": idm_gradcheck_case,
    "dynamics": dynamics_gradcheck_case,
    "value": value_gradcheck_case,
    "bc": bc_gradcheck_case,
}


def true_returns_from_states(env_name: str, traj: Trajectory) -> float:
    """Post-hoc environment-true undiscounted return computed from states.

    chain1d rewards telescope to the net displacement; bridge2d rewards
    telescope to step costs plus the goal-potential difference.
    """
    from dits import envs

    if env_name == "chain1d":
        return float(traj.states[-1, 0] - traj.states[0, 0])
    return (envs.STEP_COST * len(traj)
            + envs.GOAL_BONUS * (envs.goal_potential(traj.states[-1])
                                 - envs.goal_potential(traj.states[0])))


def fit_chain_diffuser(normalized, pair=False, **overrides):
    defaults = dict(horizon=8, diffusion_steps=24, width=32, n_blocks=2,
                    emb_dim=32, kernel=5, steps=8000, batch_size=32, lr=1e-3,
                    context=1 if pair else 2, seed=0)
    defaults.update(overrides)
    cls = PairDiffusionModel if pair else WindowDiffusionModel
    return cls(**defaults).fit(normalized)
