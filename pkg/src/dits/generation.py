"""Receding-horizon trajectory generation through state-only interaction.

Each environment step: the last C (normalized) states are clamped into the
leading blocks of a fresh window (reward slots stay free), the guided reverse
chain fills the rest, the reward is read at block C-1 and the proposed next
state at block C, the inverse dynamics model turns (s_t, proposal) into an
action, the real environment is stepped with it, and the proposal is
overwritten by the true next state. Rewards are always the diffuser's
imputed values; the environment's reward path is never touched.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .data import Dataset, Trajectory
from .diffusion import ClampSpec, SamplerParams, window_reward, window_state
from .models import ModelBundle


class HistoryQueue:
    """Bounded FIFO of the most recent <= C states, oldest first."""

    def __init__(self, maxlen: int):
        if maxlen < 1:
            raise ValueError("history length must be >= 1")
        self._items = deque(maxlen=maxlen)
        self.maxlen = maxlen

    def push(self, state) -> None:
        self._items.append(np.asarray(state, dtype=np.float32))

    def __len__(self):
        return len(self._items)

    def padded(self) -> list:
        """History left-padded with repeats of its oldest entry to length C,
        so the current state always sits at block C-1."""
        items = list(self._items)
        return [items[0]] * (self.maxlen - len(items)) + items


@dataclass(frozen=True)
class GenerationConfig:
    context: int = 4
    horizon: int = 16
    omega: float = 1.4
    alpha_temp: float = 0.5
    target_y: float = 0.9
    n_traj: int = 300
    max_steps: int | None = None
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.context < self.horizon:
            raise ValueError("need 1 <= context < horizon")

    def sampler_params(self) -> SamplerParams:
        return SamplerParams(omega=self.omega, alpha_temp=self.alpha_temp,
                             target_y=self.target_y)


def history_clamps(history: HistoryQueue) -> ClampSpec:
    """Clamp the padded history into the first C state slots; rewards of those
    blocks are left for the diffuser to fill in."""
    spec = ClampSpec()
    for block, state in enumerate(history.padded()):
        spec.add_state(block, state)
    return spec


def _rollout_lockstep(envs, bundle: ModelBundle, config: GenerationConfig,
                      rngs) -> list[Trajectory]:
    """Roll all envs in lockstep, batching denoiser evaluation across rollouts.

    Finished rollouts keep their rng streams untouched by others: every row
    draws its own noise from its own generator each step.
    """
    diffuser = bundle.diffuser
    if diffuser is None:
        raise ValueError("bundle has no trained diffuser")
    if diffuser.horizon != config.horizon:
        raise ValueError(
            f"config horizon {config.horizon} != diffuser horizon "
            f"{diffuser.horizon}")
    stats = bundle.stats
    params = config.sampler_params()
    C = config.context
    bound = envs[0].spec.action_bound
    max_steps = config.max_steps or envs[0].spec.max_episode_len
    max_steps = min(max_steps, envs[0].spec.max_episode_len)

    n = len(envs)
    states = [env.reset(int(rng.integers(0, 2 ** 31)))
              for env, rng in zip(envs, rngs)]
    histories = [HistoryQueue(C) for _ in range(n)]
    steps_taken = np.zeros(n, dtype=int)
    transitions: list[list] = [[] for _ in range(n)]
    active = list(range(n))

    while active:
        clamps = []
        for i in active:
            histories[i].push(stats.normalize_states(states[i]))
            clamps.append(history_clamps(histories[i]))
        windows = diffuser.sample(clamps, params, [rngs[i] for i in active])

        rewards = stats.denormalize_rewards(
            window_reward(windows, C - 1, diffuser.state_width))
        proposals = stats.denormalize_states(
            window_state(windows, C, diffuser.state_width))
        cur = np.stack([states[i] for i in active])
        actions = np.atleast_2d(bundle.predict_action(cur, proposals))
        actions = np.clip(actions, -bound, bound)

        still_active = []
        for row, i in enumerate(active):
            try:
                true_next = envs[i].step_state(actions[row])
            except Exception as exc:
                raise RuntimeError(f"rollout {i} failed at step "
                                   f"{steps_taken[i]}: {exc}") from exc
            transitions[i].append((states[i], actions[row],
                                   float(np.atleast_1d(rewards)[row]),
                                   true_next))
            states[i] = true_next
            steps_taken[i] += 1
            if not envs[i].done and steps_taken[i] < max_steps:
                still_active.append(i)
        active = still_active

    out = []
    for i in range(n):
        s0 = transitions[i][0][0]
        states_arr = np.stack([s0] + [t[3] for t in transitions[i]])
        out.append(Trajectory(
            states_arr,
            np.stack([t[1] for t in transitions[i]]),
            np.asarray([t[2] for t in transitions[i]], dtype=np.float32),
            terminated=envs[i].terminated, source="generated",
            policy="generated"))
    return out


def generate_trajectory(env, bundle: ModelBundle, config: GenerationConfig,
                        rng) -> Trajectory:
    """One state-only rollout (Algorithm-1 loop); env is a state-only view."""
    return _rollout_lockstep([env], bundle, config, [rng])[0]


def generate_batch(env_factory, bundle: ModelBundle,
                   config: GenerationConfig) -> Dataset:
    """n_traj independent rollouts with seeds derived from config.seed."""
    stats = bundle.stats
    if config.n_traj == 0:
        probe = env_factory()
        return Dataset([], state_dim=probe.spec.state_dim,
                       action_dim=probe.spec.action_dim)
    envs = [env_factory() for _ in range(config.n_traj)]
    seeds = np.random.SeedSequence(config.seed).generate_state(config.n_traj)
    rngs = [np.random.default_rng(int(s)) for s in seeds]
    trajectories = _rollout_lockstep(envs, bundle, config, rngs)
    for env in envs:
        if env.reward_query_count != 0:
            raise RuntimeError("state-only contract violated: the environment "
                               "reported a reward query during generation")
    return Dataset(trajectories)
