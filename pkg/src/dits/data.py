"""Trajectory and dataset containers, returns, normalization and the on-disk format.

Everything downstream (environments, model training, generation, stitching,
evaluation) consumes the types defined here. Trajectories store their states as a
single ``(L+1, m)`` array so the chaining invariant ``s_next[i] == s[i+1]`` holds
by construction and survives serialization bit-exactly.
"""

from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"DITSDATA1\n"
FORMAT_VERSION = 1

SOURCES = ("offline", "generated", "stitched")

STD_FLOOR = 1e-6


class DatasetError(Exception):
    """Base class for dataset (de)serialization failures."""


class DatasetFormatError(DatasetError):
    """Magic bytes or header are malformed."""


class DimensionMismatchError(DatasetError):
    """Header dimensions disagree with each other or with the payload layout."""


class TruncatedPayloadError(DatasetError):
    """Payload holds fewer bytes than the header declares."""


@dataclass(frozen=True)
class Transition:
    """One (s, a, r, s') step."""

    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray


@dataclass(frozen=True)
class DiscountSpec:
    """Discount factor in [0, 1)."""

    gamma: float

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")


class Trajectory:
    """Ordered transitions with shared endpoint states.

    ``states`` has one more row than ``actions``/``rewards``; transition ``i`` is
    ``(states[i], actions[i], rewards[i], states[i+1])``.
    """

    __slots__ = ("states", "actions", "rewards", "terminated", "source", "policy")

    def __init__(self, states, actions, rewards, terminated=False,
                 source="offline", policy=""):
        states = np.asarray(states, dtype=np.float32)
        actions = np.asarray(actions, dtype=np.float32)
        rewards = np.asarray(rewards, dtype=np.float32)
        if states.ndim != 2 or actions.ndim != 2 or rewards.ndim != 1:
            raise ValueError("states must be (L+1, m), actions (L, d), rewards (L,)")
        if len(states) != len(actions) + 1 or len(actions) != len(rewards):
            raise ValueError(
                f"inconsistent lengths: {len(states)} states, "
                f"{len(actions)} actions, {len(rewards)} rewards")
        if len(actions) < 1:
            raise ValueError("trajectory must contain at least one transition")
        if not np.all(np.isfinite(states)):
            raise ValueError("non-finite state entries")
        if source not in SOURCES:
            raise ValueError(f"unknown source {source!r}")
        self.states = states
        self.actions = actions
        self.rewards = rewards
        self.terminated = bool(terminated)
        self.source = source
        self.policy = policy

    @classmethod
    def from_transitions(cls, transitions, terminated=False, source="offline",
                         policy=""):
        """Build from a transition list, checking s_next[i] == s[i+1] exactly."""
        if not transitions:
            raise ValueError("empty transition list")
        states = [np.asarray(transitions[0].s, dtype=np.float32)]
        actions, rewards = [], []
        for i, tr in enumerate(transitions):
            s = np.asarray(tr.s, dtype=np.float32)
            if not np.array_equal(s, states[-1]):
                raise ValueError(f"chaining violated at transition {i}")
            states.append(np.asarray(tr.s_next, dtype=np.float32))
            actions.append(np.asarray(tr.a, dtype=np.float32))
            rewards.append(np.float32(tr.r))
        return cls(np.stack(states), np.stack(actions), np.asarray(rewards),
                   terminated=terminated, source=source, policy=policy)

    def __len__(self):
        return len(self.actions)

    def __getitem__(self, i) -> Transition:
        if not -len(self) <= i < len(self):
            raise IndexError(i)
        i = i % len(self)
        return Transition(self.states[i], self.actions[i],
                          float(self.rewards[i]), self.states[i + 1])

    def transitions(self):
        for i in range(len(self)):
            yield self[i]

    def reward_sum(self) -> float:
        return float(np.sum(self.rewards, dtype=np.float64))

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (np.array_equal(self.states, other.states)
                and np.array_equal(self.actions, other.actions)
                and np.array_equal(self.rewards, other.rewards)
                and self.terminated == other.terminated
                and self.source == other.source
                and self.policy == other.policy)

    def __repr__(self):
        return (f"Trajectory(len={len(self)}, source={self.source!r}, "
                f"policy={self.policy!r}, terminated={self.terminated})")


@dataclass(frozen=True)
class NormStats:
    """Affine normalization statistics plus condition-return bounds.

    ``return_min``/``return_max`` bound the discounted returns of all full
    length-``horizon`` windows, computed in the same (normalized) reward units the
    diffuser is trained on.
    """

    state_mean: np.ndarray
    state_std: np.ndarray
    reward_mean: float
    reward_std: float
    return_min: float
    return_max: float
    horizon: int
    gamma: float
    rewards_normalized: bool = True

    def normalize_states(self, s):
        return (np.asarray(s, dtype=np.float32) - self.state_mean) / self.state_std

    def denormalize_states(self, s):
        return np.asarray(s, dtype=np.float32) * self.state_std + self.state_mean

    def normalize_rewards(self, r):
        if not self.rewards_normalized:
            return np.asarray(r, dtype=np.float32)
        return (np.asarray(r, dtype=np.float32) - self.reward_mean) / self.reward_std

    def denormalize_rewards(self, r):
        if not self.rewards_normalized:
            return np.asarray(r, dtype=np.float32)
        return np.asarray(r, dtype=np.float32) * self.reward_std + self.reward_mean

    def normalize_return(self, value):
        """Min-max map of a window return onto [0, 1]."""
        span = max(self.return_max - self.return_min, STD_FLOOR)
        return float(np.clip((value - self.return_min) / span, 0.0, 1.0))

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.asarray(self.state_mean, dtype=np.float64).tobytes())
        h.update(np.asarray(self.state_std, dtype=np.float64).tobytes())
        h.update(struct.pack("<6d?", self.reward_mean, self.reward_std,
                             self.return_min, self.return_max,
                             float(self.horizon), self.gamma,
                             self.rewards_normalized))
        return h.hexdigest()[:16]


class Dataset:
    """Immutable collection of trajectories sharing state/action dimensions."""

    def __init__(self, trajectories, state_dim=None, action_dim=None,
                 norm_stats: NormStats | None = None):
        trajectories = list(trajectories)
        if trajectories:
            m = trajectories[0].states.shape[1]
            d = trajectories[0].actions.shape[1]
            for t in trajectories:
                if t.states.shape[1] != m or t.actions.shape[1] != d:
                    raise ValueError("trajectories disagree on state/action dims")
            state_dim, action_dim = m, d
        elif state_dim is None or action_dim is None:
            raise ValueError("empty dataset needs explicit state_dim/action_dim")
        self.trajectories = trajectories
        self.state_dim = int(state_dim)
        self.action_dim = int(action_dim)
        self.norm_stats = norm_stats

    def __len__(self):
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    @property
    def n_transitions(self) -> int:
        return sum(len(t) for t in self.trajectories)

    def all_states(self) -> np.ndarray:
        """Every state occurring in the dataset, final next-states included."""
        if not self.trajectories:
            return np.zeros((0, self.state_dim), dtype=np.float32)
        return np.concatenate([t.states for t in self.trajectories])

    def all_rewards(self) -> np.ndarray:
        if not self.trajectories:
            return np.zeros(0, dtype=np.float32)
        return np.concatenate([t.rewards for t in self.trajectories])

    def transition_matrix(self) -> np.ndarray:
        """Transitions as rows (s, a, r, s'), shape (N, 2m + d + 1)."""
        rows = []
        for t in self.trajectories:
            rows.append(np.concatenate(
                [t.states[:-1], t.actions, t.rewards[:, None], t.states[1:]],
                axis=1))
        if not rows:
            return np.zeros((0, 2 * self.state_dim + self.action_dim + 1),
                            dtype=np.float32)
        return np.concatenate(rows)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.state_dim == other.state_dim
                and self.action_dim == other.action_dim
                and len(self) == len(other)
                and all(a == b for a, b in zip(self.trajectories,
                                               other.trajectories))
                and _stats_equal(self.norm_stats, other.norm_stats))


def _stats_equal(a: NormStats | None, b: NormStats | None) -> bool:
    if a is None or b is None:
        return a is b
    return a.digest() == b.digest()


def trajectory_return(traj, gamma: float) -> float:
    """Discounted return sum_t gamma^t r_t; an empty trajectory returns 0."""
    rewards = np.asarray(traj.rewards if isinstance(traj, Trajectory) else traj,
                         dtype=np.float64)
    if rewards.size == 0:
        return 0.0
    return float(np.sum(gamma ** np.arange(rewards.size) * rewards))


def window_return(traj, t: int, horizon: int, gamma: float) -> float:
    """Discounted return of rewards t..t+horizon-1, truncated at the tail."""
    rewards = np.asarray(traj.rewards if isinstance(traj, Trajectory) else traj,
                         dtype=np.float64)
    if not 0 <= t < rewards.size:
        raise IndexError(f"window start {t} out of range for length {rewards.size}")
    chunk = rewards[t:t + horizon]
    return float(np.sum(gamma ** np.arange(chunk.size) * chunk))


def compute_norm_stats(dataset: Dataset, horizon: int, gamma: float,
                       normalize_rewards: bool = True) -> NormStats:
    """Population mean/std over all states and rewards, stds floored at 1e-6."""
    if not len(dataset):
        raise ValueError("cannot compute stats of an empty dataset")
    states = dataset.all_states().astype(np.float64)
    rewards = dataset.all_rewards().astype(np.float64)
    state_mean = states.mean(axis=0)
    state_std = np.maximum(states.std(axis=0), STD_FLOOR)
    reward_mean = float(rewards.mean())
    reward_std = max(float(rewards.std()), STD_FLOOR)

    returns = []
    for traj in dataset:
        norm_r = ((traj.rewards - reward_mean) / reward_std
                  if normalize_rewards else traj.rewards)
        for t in range(len(traj) - horizon + 1):
            returns.append(window_return(norm_r, t, horizon, gamma))
    if returns:
        rmin, rmax = float(min(returns)), float(max(returns))
    else:
        rmin, rmax = 0.0, 1.0
    return NormStats(state_mean=state_mean.astype(np.float32),
                     state_std=state_std.astype(np.float32),
                     reward_mean=np.float32(reward_mean),
                     reward_std=np.float32(reward_std),
                     return_min=rmin, return_max=rmax,
                     horizon=int(horizon), gamma=float(gamma),
                     rewards_normalized=normalize_rewards)


def normalize(dataset: Dataset, horizon: int, gamma: float,
              normalize_rewards: bool = True,
              stats: NormStats | None = None) -> Dataset:
    """Affine-map states (and rewards) to zero mean / unit variance.

    Returns a new Dataset carrying the stats used; pass ``stats`` to reuse a
    previously computed normalization.
    """
    if dataset.norm_stats is not None:
        raise ValueError("dataset is already normalized")
    if stats is None:
        stats = compute_norm_stats(dataset, horizon, gamma, normalize_rewards)
    out = []
    for traj in dataset:
        out.append(Trajectory(stats.normalize_states(traj.states),
                              traj.actions,
                              stats.normalize_rewards(traj.rewards),
                              terminated=traj.terminated,
                              source=traj.source, policy=traj.policy))
    return Dataset(out, norm_stats=stats)


def denormalize(dataset: Dataset) -> Dataset:
    """Inverse of :func:`normalize`; identity within 1e-6 relative error."""
    stats = dataset.norm_stats
    if stats is None:
        raise ValueError("dataset carries no normalization stats")
    out = []
    for traj in dataset:
        out.append(Trajectory(stats.denormalize_states(traj.states),
                              traj.actions,
                              stats.denormalize_rewards(traj.rewards),
                              terminated=traj.terminated,
                              source=traj.source, policy=traj.policy))
    return Dataset(out, norm_stats=None)


# ---------------------------------------------------------------------------
# On-disk format: MAGIC, key=value header, "end_header" marker, then a u32
# little-endian per-trajectory length table followed by the float32 payload of
# concatenated (s, a, r, s') transitions.
# ---------------------------------------------------------------------------

def _floats_per_transition(m: int, d: int) -> int:
    return 2 * m + d + 1


def save_dataset(dataset: Dataset, path) -> None:
    m, d = dataset.state_dim, dataset.action_dim
    lengths = np.asarray([len(t) for t in dataset], dtype=np.uint32)
    payload_floats = int(lengths.sum()) * _floats_per_transition(m, d)

    lines = [
        f"version={FORMAT_VERSION}",
        f"m={m}",
        f"d={d}",
        f"n_traj={len(dataset)}",
        f"payload_floats={payload_floats}",
    ]
    stats = dataset.norm_stats
    lines.append(f"normalized={int(stats is not None)}")
    if stats is not None:
        lines.append("state_mean=" + ",".join(
            float(v).hex() for v in np.asarray(stats.state_mean, np.float64)))
        lines.append("state_std=" + ",".join(
            float(v).hex() for v in np.asarray(stats.state_std, np.float64)))
        lines.append(f"reward_mean={float(stats.reward_mean).hex()}")
        lines.append(f"reward_std={float(stats.reward_std).hex()}")
        lines.append(f"return_min={float(stats.return_min).hex()}")
        lines.append(f"return_max={float(stats.return_max).hex()}")
        lines.append(f"horizon={stats.horizon}")
        lines.append(f"gamma={float(stats.gamma).hex()}")
        lines.append(f"rewards_normalized={int(stats.rewards_normalized)}")
    for i, traj in enumerate(dataset):
        lines.append(f"traj{i}={traj.source},{traj.policy},{int(traj.terminated)}")
    header = "\n".join(lines) + "\nend_header\n"

    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(header.encode("utf-8"))
    buf.write(lengths.astype("<u4").tobytes())
    for traj in dataset:
        block = np.concatenate(
            [traj.states[:-1], traj.actions, traj.rewards[:, None],
             traj.states[1:]], axis=1).astype("<f4")
        buf.write(block.tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def _parse_header(blob: bytes):
    if not blob.startswith(MAGIC):
        raise DatasetFormatError("bad magic bytes (not a dataset file)")
    end = blob.find(b"end_header\n", len(MAGIC))
    if end < 0:
        raise DatasetFormatError("missing end_header marker")
    fields = {}
    for raw in blob[len(MAGIC):end].decode("utf-8").splitlines():
        if not raw:
            continue
        if "=" not in raw:
            raise DatasetFormatError(f"malformed header line {raw!r}")
        key, value = raw.split("=", 1)
        fields[key] = value
    body = blob[end + len(b"end_header\n"):]
    return fields, body


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    fields, body = _parse_header(blob)
    try:
        version = int(fields["version"])
        m = int(fields["m"])
        d = int(fields["d"])
        n_traj = int(fields["n_traj"])
        payload_floats = int(fields["payload_floats"])
    except (KeyError, ValueError) as exc:
        raise DatasetFormatError(f"missing or invalid header field: {exc}") from exc
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported version {version}")

    table_bytes = 4 * n_traj
    if len(body) < table_bytes:
        raise TruncatedPayloadError("length table truncated")
    lengths = np.frombuffer(body[:table_bytes], dtype="<u4")
    fpt = _floats_per_transition(m, d)
    expected_floats = int(lengths.sum()) * fpt
    if expected_floats != payload_floats:
        raise DimensionMismatchError(
            f"header declares {payload_floats} payload floats but m={m}, d={d} "
            f"and the length table imply {expected_floats}")
    payload = body[table_bytes:]
    if len(payload) < 4 * payload_floats:
        raise TruncatedPayloadError(
            f"payload holds {len(payload)} bytes, expected {4 * payload_floats}")
    if len(payload) > 4 * payload_floats:
        raise DatasetFormatError("trailing bytes after payload")

    flat = np.frombuffer(payload, dtype="<f4")
    stats = None
    if fields.get("normalized") == "1":
        try:
            stats = NormStats(
                state_mean=np.asarray([float.fromhex(v) for v in
                                       fields["state_mean"].split(",")],
                                      dtype=np.float32),
                state_std=np.asarray([float.fromhex(v) for v in
                                      fields["state_std"].split(",")],
                                     dtype=np.float32),
                reward_mean=np.float32(float.fromhex(fields["reward_mean"])),
                reward_std=np.float32(float.fromhex(fields["reward_std"])),
                return_min=float.fromhex(fields["return_min"]),
                return_max=float.fromhex(fields["return_max"]),
                horizon=int(fields["horizon"]),
                gamma=float.fromhex(fields["gamma"]),
                rewards_normalized=fields.get("rewards_normalized", "1") == "1",
            )
        except (KeyError, ValueError) as exc:
            raise DatasetFormatError(f"invalid norm stats: {exc}") from exc
        if stats.state_mean.shape != (m,):
            raise DimensionMismatchError("norm stats dimension != m")

    trajectories = []
    offset = 0
    for i, L in enumerate(lengths):
        L = int(L)
        block = flat[offset:offset + L * fpt].reshape(L, fpt)
        offset += L * fpt
        meta = fields.get(f"traj{i}", "offline,,0").split(",")
        states = np.concatenate([block[:, :m], block[-1:, m + d + 1:]], axis=0)
        traj = Trajectory(states,
                          block[:, m:m + d],
                          block[:, m + d],
                          terminated=meta[2] == "1",
                          source=meta[0], policy=meta[1])
        if not np.array_equal(block[1:, :m], block[:-1, m + d + 1:]):
            raise DatasetFormatError(f"chaining violated in stored trajectory {i}")
        trajectories.append(traj)
    return Dataset(trajectories, state_dim=m, action_dim=d, norm_stats=stats)
