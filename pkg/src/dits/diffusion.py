"""Conditional DDPM over interleaved (state, reward) windows.

Windows are flat vectors of H blocks. The main layout packs (s_i, r_i) per
block; the alternate pair layout packs (s_i, s_{i+1}, r_i) and is used by the
stand-alone reward diffuser. Sampling supports classifier-free guidance with
scale omega, low-temperature covariance scaling alpha_temp, and per-step
clamping of chosen blocks.

All sampling noise comes from numpy Generators passed in by the caller; torch
is only used to evaluate the denoiser network.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .data import Dataset, window_return
from .models import ParamsMixin
from .nets import (adam_train, load_checkpoint, save_checkpoint,
                   set_flat_params)


# ---------------------------------------------------------------------------
# Noise schedule
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step alpha/alphabar/beta for k = 1..K (arrays are 0-indexed by k-1)."""

    kind: str
    alpha: np.ndarray
    alphabar: np.ndarray
    beta: np.ndarray

    @property
    def K(self) -> int:
        return len(self.alpha)

    def alphabar_prev(self, k: int) -> float:
        """alphabar_{k-1}, with alphabar_0 = 1."""
        return 1.0 if k == 1 else float(self.alphabar[k - 2])

    def posterior_variance(self, k: int) -> float:
        """Variance of q(x_{k-1} | x_k, x_0): beta_k (1-abar_{k-1})/(1-abar_k)."""
        self._check_k(k)
        return float(self.beta[k - 1] * (1.0 - self.alphabar_prev(k))
                     / (1.0 - self.alphabar[k - 1]))

    def _check_k(self, k: int):
        if not 1 <= k <= self.K:
            raise ValueError(f"diffusion step k={k} outside [1, {self.K}]")


def make_schedule(K: int, kind: str = "cosine") -> NoiseSchedule:
    """Cosine (default) or linear variance schedule with strictly decreasing
    alphabar; the linear betas are rescaled by 1000/K so short schedules still
    destroy the signal."""
    if K < 1:
        raise ValueError("K must be >= 1")
    if kind == "cosine":
        s = 0.008
        steps = np.arange(K + 1, dtype=np.float64)
        f = np.cos((steps / K + s) / (1 + s) * math.pi / 2) ** 2
        alphabar_full = f / f[0]
        beta = 1.0 - alphabar_full[1:] / alphabar_full[:-1]
        beta = np.clip(beta, 1e-8, 0.999)
    elif kind == "linear":
        scale = 1000.0 / K
        beta = np.linspace(1e-4 * scale, 0.02 * scale, K)
        beta = np.clip(beta, 1e-8, 0.999)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    alpha = 1.0 - beta
    alphabar = np.cumprod(alpha)
    return NoiseSchedule(kind=kind, alpha=alpha, alphabar=alphabar, beta=beta)


def forward_sample(x0, k: int, schedule: NoiseSchedule, noise):
    """q(x_k | x_0): sqrt(abar_k) x0 + sqrt(1 - abar_k) noise (numpy or torch)."""
    schedule._check_k(k)
    abar = schedule.alphabar[k - 1]
    return math.sqrt(abar) * x0 + math.sqrt(1.0 - abar) * noise


# ---------------------------------------------------------------------------
# Window layout helpers
# ---------------------------------------------------------------------------

def block_size(state_width: int) -> int:
    return state_width + 1


def window_state(x, block: int, state_width: int):
    base = block * block_size(state_width)
    return x[..., base:base + state_width]


def window_reward(x, block: int, state_width: int):
    return x[..., block * block_size(state_width) + state_width]


@dataclass
class ClampSpec:
    """Slots overwritten at every reverse step: (block index, field, value)."""

    entries: list = field(default_factory=list)

    def add_state(self, block: int, value):
        self.entries.append((int(block), "state",
                             np.asarray(value, dtype=np.float32)))
        return self

    def add_reward(self, block: int, value: float):
        self.entries.append((int(block), "reward", float(value)))
        return self

    def apply(self, x: np.ndarray, state_width: int, horizon: int) -> None:
        """In-place overwrite; x is (..., H * (state_width+1))."""
        bs = block_size(state_width)
        for block, kind, value in self.entries:
            if block >= horizon:
                raise ValueError(f"clamp block {block} >= horizon {horizon}")
            base = block * bs
            if kind == "state":
                x[..., base:base + state_width] = value
            else:
                x[..., base + state_width] = value


@dataclass(frozen=True)
class SamplerParams:
    """Guidance scale, low-temperature covariance scale, and condition target."""

    omega: float = 1.4
    alpha_temp: float = 0.5
    target_y: float = 0.9

    def __post_init__(self):
        if self.omega < 0:
            raise ValueError("omega must be >= 0")
        if not 0.0 <= self.alpha_temp <= 1.0:
            raise ValueError("alpha_temp must lie in [0, 1] "
                             "(0 is the deterministic chain)")


# ---------------------------------------------------------------------------
# Denoiser network
# ---------------------------------------------------------------------------

def sinusoidal_embedding(k: torch.Tensor, dim: int,
                         dtype=torch.float32) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10_000.0)
                      * torch.arange(half, dtype=torch.float64)
                      / max(half - 1, 1))
    angles = k.double()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(angles), torch.cos(angles)],
                     dim=-1).to(dtype)


def _norm_groups(width: int) -> int:
    for groups in (8, 4, 2, 1):
        if width % groups == 0:
            return groups
    return 1


class _ResidualBlock(nn.Module):
    """Two temporal convolutions with group norm and Mish; the step/condition
    embedding enters as a per-channel scale and shift (FiLM), which lets the
    network express noise-level-dependent gains."""

    def __init__(self, width: int, emb_dim: int, kernel: int):
        super().__init__()
        pad = kernel // 2
        groups = _norm_groups(width)
        self.conv1 = nn.Conv1d(width, width, kernel, padding=pad)
        self.norm1 = nn.GroupNorm(groups, width)
        self.conv2 = nn.Conv1d(width, width, kernel, padding=pad)
        self.norm2 = nn.GroupNorm(groups, width)
        self.emb_proj = nn.Linear(emb_dim, 2 * width)
        self.act = nn.Mish()

    def forward(self, h, emb):
        out = self.act(self.norm1(self.conv1(h)))
        scale, shift = self.emb_proj(emb).chunk(2, dim=-1)
        out = out * (1.0 + scale[:, :, None]) + shift[:, :, None]
        out = self.act(self.norm2(self.conv2(out)))
        return out + h


class TemporalResNet(nn.Module):
    """Residual temporal conv net over windows with step/condition embeddings.

    The null condition is encoded as a zeroed value plus a 1-bit flag channel
    feeding the condition embedding MLP.
    """

    def __init__(self, channels: int, width: int = 64, n_blocks: int = 3,
                 emb_dim: int = 64, kernel: int = 5, seed: int = 0):
        super().__init__()
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.time_mlp = nn.Sequential(
                nn.Linear(emb_dim, 2 * emb_dim), nn.Mish(),
                nn.Linear(2 * emb_dim, emb_dim))
            self.cond_mlp = nn.Sequential(
                nn.Linear(2, 2 * emb_dim), nn.Mish(),
                nn.Linear(2 * emb_dim, emb_dim))
            self.lift = nn.Conv1d(channels, width, kernel, padding=kernel // 2)
            self.blocks = nn.ModuleList(
                [_ResidualBlock(width, 2 * emb_dim, kernel)
                 for _ in range(n_blocks)])
            self.head = nn.Conv1d(width, channels, 1)
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)
        self.channels = channels
        self.emb_dim = emb_dim

    def forward(self, x, y, null_mask, k):
        """x: (B, H*channels) flat windows; y, null_mask, k: (B,)."""
        B = x.shape[0]
        h = x.reshape(B, -1, self.channels).transpose(1, 2)
        t_emb = self.time_mlp(sinusoidal_embedding(k, self.emb_dim,
                                                   dtype=x.dtype))
        not_null = 1.0 - null_mask.to(x.dtype)
        cond_in = torch.stack([y.to(x.dtype) * not_null,
                               null_mask.to(x.dtype)], dim=-1)
        c_emb = self.cond_mlp(cond_in)
        emb = torch.cat([t_emb, c_emb], dim=-1)
        h = self.lift(h)
        for block in self.blocks:
            h = block(h, emb)
        out = self.head(h).transpose(1, 2).reshape(B, -1)
        return out


def denoise_training_loss(net, x0, k, noise, y, null_mask,
                          schedule: NoiseSchedule,
                          clamp_mask=None) -> torch.Tensor:
    """MSE between the drawn noise and the model's prediction at step k.

    ``clamp_mask`` (B, D) marks slots that are conditioning inputs at
    sampling time: they are restored to their clean values in x_k (mirroring
    the per-step clamping of the samplers) and excluded from the loss.
    """
    abar = torch.as_tensor(schedule.alphabar, dtype=x0.dtype)[k - 1]
    x_k = torch.sqrt(abar)[:, None] * x0 + torch.sqrt(1 - abar)[:, None] * noise
    if clamp_mask is None:
        pred = net(x_k, y, null_mask, k)
        return ((pred - noise) ** 2).mean()
    x_k = torch.where(clamp_mask, x0, x_k)
    pred = net(x_k, y, null_mask, k)
    free = (~clamp_mask).to(x0.dtype)
    return ((pred - noise) ** 2 * free).sum() / free.sum()


# ---------------------------------------------------------------------------
# Guided reverse process
# ---------------------------------------------------------------------------

def guided_epsilon(denoiser, x: np.ndarray, y, k: int,
                   omega: float) -> np.ndarray:
    """eps_uncond + omega * (eps_cond - eps_uncond); omega 0/1 return the
    unconditional/conditional output exactly."""
    x = np.atleast_2d(np.asarray(x))
    B = x.shape[0]
    y_vec = np.full(B, y) if np.isscalar(y) else np.asarray(y)
    if omega == 0.0:
        return denoiser.epsilon(x, y_vec, np.ones(B, dtype=bool), k)
    if omega == 1.0:
        return denoiser.epsilon(x, y_vec, np.zeros(B, dtype=bool), k)
    stacked = denoiser.epsilon(
        np.concatenate([x, x], axis=0),
        np.concatenate([y_vec, y_vec]),
        np.concatenate([np.zeros(B, dtype=bool), np.ones(B, dtype=bool)]),
        k)
    cond, uncond = stacked[:B], stacked[B:]
    return uncond + omega * (cond - uncond)


def denoise_step(x: np.ndarray, eps_hat: np.ndarray, k: int,
                 schedule: NoiseSchedule, alpha_temp: float,
                 rng) -> np.ndarray:
    """One reverse step: posterior mean from the DDPM mean formula plus
    alpha_temp-scaled posterior noise; the k=1 step is deterministic.

    Arithmetic is float64 regardless of input dtype.
    """
    schedule._check_k(k)
    beta = schedule.beta[k - 1]
    abar = schedule.alphabar[k - 1]
    mean = (np.asarray(x, dtype=np.float64)
            - beta / math.sqrt(1.0 - abar) * np.asarray(eps_hat,
                                                        dtype=np.float64)) \
        / math.sqrt(schedule.alpha[k - 1])
    if k == 1 or alpha_temp == 0.0:
        return mean
    std = math.sqrt(alpha_temp * schedule.posterior_variance(k))
    if isinstance(rng, (list, tuple)):
        noise = np.stack([r.standard_normal(x.shape[-1]) for r in rng])
    else:
        noise = rng.standard_normal(x.shape)
    return mean + std * noise


def sample_windows(denoiser, schedule: NoiseSchedule, clamps,
                   params: SamplerParams, rngs, horizon: int,
                   state_width: int) -> np.ndarray:
    """Batched reverse chain; row i uses rngs[i] and clamps[i].

    Clamped slots are re-imposed before every guided prediction and on the
    returned x_0, so they match the clamp values exactly.
    """
    if not isinstance(clamps, (list, tuple)):
        clamps = [clamps]
    if not isinstance(rngs, (list, tuple)):
        rngs = [rngs]
    B = len(rngs)
    if len(clamps) != B:
        raise ValueError("need one ClampSpec per rng")
    dim = horizon * block_size(state_width)
    scale = math.sqrt(params.alpha_temp) if params.alpha_temp > 0 else 0.0
    x = np.stack([scale * rng.standard_normal(dim) for rng in rngs])
    for k in range(schedule.K, 0, -1):
        for i, clamp in enumerate(clamps):
            clamp.apply(x[i], state_width, horizon)
        eps_hat = guided_epsilon(denoiser, x, params.target_y, k, params.omega)
        x = denoise_step(x, eps_hat, k, schedule, params.alpha_temp, rngs)
    for i, clamp in enumerate(clamps):
        clamp.apply(x[i], state_width, horizon)
    return x.astype(np.float32)


def sample_window(denoiser, schedule: NoiseSchedule, clamps: ClampSpec,
                  params: SamplerParams, rng, horizon: int,
                  state_width: int) -> np.ndarray:
    """Single-window convenience wrapper around :func:`sample_windows`."""
    return sample_windows(denoiser, schedule, [clamps], params, [rng],
                          horizon, state_width)[0]


# ---------------------------------------------------------------------------
# Trainable diffusion models
# ---------------------------------------------------------------------------

class _DiffusionBase(ParamsMixin):
    layout = "state_reward"

    def __init__(self, horizon=16, diffusion_steps=64, schedule="cosine",
                 width=64, n_blocks=3, emb_dim=64, kernel=5, p_drop=0.25,
                 context=1, lr=2e-4, batch_size=32, steps=20_000,
                 ema_decay=0.995, seed=0):
        if not 0 <= context < horizon:
            raise ValueError("need 0 <= context < horizon")
        self.horizon = horizon
        self.diffusion_steps = diffusion_steps
        self.schedule = schedule
        self.width = width
        self.n_blocks = n_blocks
        self.emb_dim = emb_dim
        self.kernel = kernel
        self.p_drop = p_drop
        self.context = context
        self.lr = lr
        self.batch_size = batch_size
        self.steps = steps
        self.ema_decay = ema_decay
        self.seed = seed
        self.net_ = None
        self.schedule_ = None
        self.state_dim_ = None
        self.loss_history_ = None

    # layout hooks ----------------------------------------------------------

    @property
    def state_width(self) -> int:
        raise NotImplementedError

    def _windows(self, dataset: Dataset):
        """(window matrix, normalized window returns) over valid (traj, t)."""
        raise NotImplementedError

    def impute_clamps(self, s_norm, s_hat_norm) -> ClampSpec:
        raise NotImplementedError

    # training ----------------------------------------------------------------

    def fit(self, dataset: Dataset):
        if dataset.norm_stats is None:
            raise ValueError("diffusion training expects a normalized dataset")
        self.state_dim_ = dataset.state_dim
        windows, returns = self._windows(dataset)
        if len(windows) == 0:
            raise ValueError(
                f"horizon {self.horizon} exceeds every trajectory length; "
                "no full training windows exist")
        self.schedule_ = make_schedule(self.diffusion_steps, self.schedule)
        self.net_ = TemporalResNet(block_size(self.state_width),
                                   width=self.width, n_blocks=self.n_blocks,
                                   emb_dim=self.emb_dim, kernel=self.kernel,
                                   seed=self.seed)
        x_all = torch.from_numpy(windows)
        y_all = torch.from_numpy(returns)
        rng = np.random.default_rng(self.seed + 17)
        K = self.schedule_.K

        # Conditioning slots are clamped clean during training too (decision
        # diffuser lineage), with a random prefix length up to self.context so
        # both the history sampler and the reward imputer see in-distribution
        # inputs. slot_block/slot_is_state describe the flat window layout.
        bs = block_size(self.state_width)
        slot_block = torch.arange(windows.shape[1]) // bs
        slot_is_state = (torch.arange(windows.shape[1]) % bs) \
            < self.state_width

        def make_batch(step):
            idx = rng.integers(0, len(windows), size=self.batch_size)
            k = rng.integers(1, K + 1, size=self.batch_size)
            noise = rng.standard_normal(
                (self.batch_size, windows.shape[1])).astype(np.float32)
            null = rng.random(self.batch_size) < self.p_drop
            prefix = rng.integers(1, self.context + 1, size=self.batch_size) \
                if self.context else np.zeros(self.batch_size, dtype=int)
            return (torch.from_numpy(idx), torch.from_numpy(k),
                    torch.from_numpy(noise), torch.from_numpy(null),
                    torch.from_numpy(prefix))

        def loss_fn(net, batch):
            idx, k, noise, null, prefix = batch
            clamp_mask = slot_is_state[None, :] \
                & (slot_block[None, :] < prefix[:, None])
            return denoise_training_loss(net, x_all[idx], k, noise,
                                         y_all[idx], null, self.schedule_,
                                         clamp_mask=clamp_mask)

        post_step = None
        if self.ema_decay:
            shadow = [p.detach().clone() for p in self.net_.parameters()]

            def post_step(module):
                with torch.no_grad():
                    for buf, p in zip(shadow, module.parameters()):
                        buf.mul_(self.ema_decay).add_(p.detach(),
                                                      alpha=1 - self.ema_decay)

        self.loss_history_, _ = adam_train(self.net_, make_batch, loss_fn,
                                           self.steps, self.lr,
                                           post_step=post_step)
        if self.ema_decay and self.steps > 0:
            with torch.no_grad():
                for buf, p in zip(shadow, self.net_.parameters()):
                    p.copy_(buf)
        return self

    # inference ----------------------------------------------------------------

    def epsilon(self, x: np.ndarray, y, null_mask, k) -> np.ndarray:
        """Predicted noise for flat windows x; p_drop >= 1 models are
        unconditional by construction and ignore y entirely."""
        if self.net_ is None:
            raise RuntimeError("model is not fitted")
        x = np.atleast_2d(np.asarray(x, dtype=np.float32))
        B = x.shape[0]
        y_vec = np.full(B, y, dtype=np.float32) if np.isscalar(y) \
            else np.asarray(y, dtype=np.float32)
        null = np.full(B, bool(null_mask)) if np.isscalar(null_mask) \
            else np.asarray(null_mask, dtype=bool)
        if self.p_drop >= 1.0:
            null = np.ones(B, dtype=bool)
        k_vec = np.full(B, k, dtype=np.int64) if np.isscalar(k) \
            else np.asarray(k, dtype=np.int64)
        with torch.no_grad():
            out = self.net_(torch.from_numpy(x),
                            torch.from_numpy(y_vec),
                            torch.from_numpy(null),
                            torch.from_numpy(k_vec))
        return out.numpy()

    def sample(self, clamps, params: SamplerParams, rngs) -> np.ndarray:
        single = not isinstance(rngs, (list, tuple))
        if single:
            clamps, rngs = [clamps], [rngs]
        out = sample_windows(self, self.schedule_, clamps, params, rngs,
                             self.horizon, self.state_width)
        return out[0] if single else out

    # persistence ----------------------------------------------------------------

    def save(self, path, stats_digest: str = "") -> None:
        arch = {k: v for k, v in self.get_params().items()}
        arch["state_dim"] = self.state_dim_
        arch["layout"] = self.layout
        save_checkpoint(path, "diffuser", arch, self.net_, stats_digest)

    @classmethod
    def load(cls, path, expected_digest: str | None = None):
        header, params = load_checkpoint(path)
        if expected_digest is not None \
                and header["stats_digest"] != expected_digest:
            raise RuntimeError(
                f"diffuser checkpoint stats {header['stats_digest']} do not "
                f"match bundle stats {expected_digest}")
        arch = dict(header["arch"])
        layout = arch.pop("state_dim"), arch.pop("layout")
        state_dim, layout_name = layout
        model_cls = (WindowDiffusionModel if layout_name == "state_reward"
                     else PairDiffusionModel)
        model = model_cls(**arch)
        model.state_dim_ = state_dim
        model.schedule_ = make_schedule(model.diffusion_steps, model.schedule)
        model.net_ = TemporalResNet(block_size(model.state_width),
                                    width=model.width,
                                    n_blocks=model.n_blocks,
                                    emb_dim=model.emb_dim,
                                    kernel=model.kernel, seed=model.seed)
        set_flat_params(model.net_, params)
        return model


class WindowDiffusionModel(_DiffusionBase):
    """Return-conditioned diffuser over H blocks of (state, reward)."""

    layout = "state_reward"

    @property
    def state_width(self) -> int:
        return self.state_dim_

    def _windows(self, dataset: Dataset):
        stats = dataset.norm_stats
        H = self.horizon
        rows, ys = [], []
        for traj in dataset:
            for t in range(len(traj) - H + 1):
                block = np.concatenate(
                    [traj.states[t:t + H], traj.rewards[t:t + H, None]],
                    axis=1)
                rows.append(block.reshape(-1))
                ys.append(stats.normalize_return(
                    window_return(traj, t, H, stats.gamma)))
        if not rows:
            return (np.zeros((0, H * block_size(dataset.state_dim)),
                             dtype=np.float32),
                    np.zeros(0, dtype=np.float32))
        return (np.stack(rows).astype(np.float32),
                np.asarray(ys, dtype=np.float32))

    def impute_clamps(self, s_norm, s_hat_norm) -> ClampSpec:
        return ClampSpec().add_state(0, s_norm).add_state(1, s_hat_norm)


class PairDiffusionModel(_DiffusionBase):
    """Alternate reward diffuser over H blocks of (s_i, s_{i+1}, r_i)."""

    layout = "pair"

    @property
    def state_width(self) -> int:
        return 2 * self.state_dim_

    def _windows(self, dataset: Dataset):
        stats = dataset.norm_stats
        H = self.horizon
        rows, ys = [], []
        for traj in dataset:
            for t in range(len(traj) - H + 1):
                block = np.concatenate(
                    [traj.states[t:t + H], traj.states[t + 1:t + H + 1],
                     traj.rewards[t:t + H, None]], axis=1)
                rows.append(block.reshape(-1))
                ys.append(stats.normalize_return(
                    window_return(traj, t, H, stats.gamma)))
        if not rows:
            return (np.zeros((0, H * block_size(2 * dataset.state_dim)),
                             dtype=np.float32),
                    np.zeros(0, dtype=np.float32))
        return (np.stack(rows).astype(np.float32),
                np.asarray(ys, dtype=np.float32))

    def impute_clamps(self, s_norm, s_hat_norm) -> ClampSpec:
        return ClampSpec().add_state(
            0, np.concatenate([s_norm, s_hat_norm]))


def impute_rewards_batch(diffuser, stats, s, s_hat, params: SamplerParams,
                         seed: int) -> np.ndarray:
    """Reward imputation for (s, s_hat) pairs: clamp the leading states, run
    the guided reverse chain, read block 0's reward, denormalize."""
    s = np.atleast_2d(np.asarray(s, dtype=np.float32))
    s_hat = np.atleast_2d(np.asarray(s_hat, dtype=np.float32))
    s_norm = stats.normalize_states(s)
    hat_norm = stats.normalize_states(s_hat)
    clamps = [diffuser.impute_clamps(s_norm[i], hat_norm[i])
              for i in range(len(s))]
    seeds = np.random.SeedSequence(seed).generate_state(len(s))
    rngs = [np.random.default_rng(int(v)) for v in seeds]
    windows = sample_windows(diffuser, diffuser.schedule_, clamps, params,
                             rngs, diffuser.horizon, diffuser.state_width)
    rewards = window_reward(windows, 0, diffuser.state_width)
    return np.asarray(stats.denormalize_rewards(rewards), dtype=np.float32)


def impute_reward(diffuser, stats, s, s_hat, params: SamplerParams,
                  rng) -> float:
    """Single-pair reward imputation (Algorithm-3 contract)."""
    s_norm = stats.normalize_states(np.asarray(s, dtype=np.float32))
    hat_norm = stats.normalize_states(np.asarray(s_hat, dtype=np.float32))
    clamp = diffuser.impute_clamps(s_norm, hat_norm)
    window = sample_window(diffuser, diffuser.schedule_, clamp, params, rng,
                           diffuser.horizon, diffuser.state_width)
    return float(stats.denormalize_rewards(
        window_reward(window, 0, diffuser.state_width)))


def windows_to_transitions(windows: np.ndarray, state_width: int,
                           horizon: int) -> np.ndarray:
    """Rows (s_i, r_i, s_{i+1}) from consecutive blocks of sampled windows."""
    windows = np.atleast_2d(windows)
    rows = []
    for i in range(horizon - 1):
        rows.append(np.concatenate(
            [window_state(windows, i, state_width),
             window_reward(windows, i, state_width)[:, None],
             window_state(windows, i + 1, state_width)], axis=1))
    return np.concatenate(rows, axis=0)
