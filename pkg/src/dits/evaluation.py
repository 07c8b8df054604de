"""Downstream behavioral cloning, normalized-return evaluation, and the
KS/Pearson distribution-similarity metrics, plus the ablation runners."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .data import Dataset
from .models import ParamsMixin
from .nets import (adam_train, config_digest, load_checkpoint, make_mlp,
                   save_checkpoint, set_flat_params)


def imitation_loss(net, s, a) -> torch.Tensor:
    return ((net(s) - a) ** 2).sum(dim=-1).mean()


class BehavioralCloningPolicy(ParamsMixin):
    """MSE imitation of the dataset's state->action map on raw-unit data.

    States are standardized internally with stats computed from the training
    set; predictions come back in raw action units.
    """

    def __init__(self, hidden=(256, 256), lr=3e-4, batch_size=256,
                 steps=20_000, holdout_frac=0.1, seed=0):
        self.hidden = tuple(hidden)
        self.lr = lr
        self.batch_size = batch_size
        self.steps = steps
        self.holdout_frac = holdout_frac
        self.seed = seed
        self.net_ = None
        self.state_mean_ = None
        self.state_std_ = None
        self.report_ = {}

    def fit(self, dataset: Dataset):
        if len(dataset) == 0 or dataset.n_transitions == 0:
            raise ValueError("cannot clone from an empty dataset")
        states = np.concatenate([t.states[:-1] for t in dataset])
        actions = np.concatenate([t.actions for t in dataset])
        self.state_mean_ = states.astype(np.float64).mean(axis=0) \
            .astype(np.float32)
        self.state_std_ = np.maximum(states.astype(np.float64).std(axis=0),
                                     1e-6).astype(np.float32)
        s = torch.from_numpy((states - self.state_mean_) / self.state_std_)
        a = torch.from_numpy(actions)

        rng = np.random.default_rng(self.seed)
        n = len(s)
        perm = rng.permutation(n)
        n_holdout = max(1, int(round(self.holdout_frac * n))) if n > 1 else 0
        train_idx, holdout_idx = perm[n_holdout:], perm[:n_holdout]
        self.net_ = make_mlp(states.shape[1], self.hidden, actions.shape[1],
                             seed=self.seed)

        def make_batch(step):
            return train_idx[rng.integers(0, len(train_idx),
                                          size=self.batch_size)]

        def loss_fn(net, idx):
            return imitation_loss(net, s[idx], a[idx])

        adam_train(self.net_, make_batch, loss_fn, self.steps, self.lr)
        with torch.no_grad():
            hold = (imitation_loss(self.net_, s[holdout_idx], a[holdout_idx])
                    if len(holdout_idx) else torch.tensor(float("nan")))
        self.report_ = {"holdout_mse": float(hold)}
        return self

    def predict(self, s) -> np.ndarray:
        if self.net_ is None:
            raise RuntimeError("policy is not fitted")
        s = np.atleast_2d(np.asarray(s, dtype=np.float32))
        s = (s - self.state_mean_) / self.state_std_
        with torch.no_grad():
            out = self.net_(torch.from_numpy(s))
        out = out.numpy()
        return out[0] if out.shape[0] == 1 else out

    def save(self, path) -> None:
        arch = {"hidden": list(self.hidden), "seed": self.seed,
                "state_dim": len(self.state_mean_),
                "action_dim": self.net_[-1].out_features}
        extra = {"state_mean": [float(v).hex() for v in
                                np.asarray(self.state_mean_, np.float64)],
                 "state_std": [float(v).hex() for v in
                               np.asarray(self.state_std_, np.float64)]}
        save_checkpoint(path, "bc-policy", arch, self.net_, "", extra=extra)

    @classmethod
    def load(cls, path) -> "BehavioralCloningPolicy":
        header, params = load_checkpoint(path)
        arch = header["arch"]
        policy = cls(hidden=arch["hidden"], seed=arch["seed"])
        policy.net_ = make_mlp(arch["state_dim"], arch["hidden"],
                               arch["action_dim"], seed=arch["seed"])
        set_flat_params(policy.net_, params)
        policy.state_mean_ = np.asarray(
            [float.fromhex(v) for v in header["extra"]["state_mean"]],
            dtype=np.float32)
        policy.state_std_ = np.asarray(
            [float.fromhex(v) for v in header["extra"]["state_std"]],
            dtype=np.float32)
        return policy


def evaluate_policy(env, policy, episodes: int = 10,
                    seed: int = 0) -> np.ndarray:
    """Undiscounted reward sums of `episodes` rollouts; bit-identical across
    repeated calls with the same seed."""
    seeds = np.random.SeedSequence(seed).generate_state(episodes)
    scores = []
    for ep_seed in seeds:
        state = env.reset(int(ep_seed))
        total = 0.0
        while not env.done:
            action = np.asarray(policy.predict(state)).reshape(-1)
            action = np.clip(action, -env.spec.action_bound,
                             env.spec.action_bound)
            state, reward, _ = env.step_full(action)
            total += reward
        scores.append(total)
    return np.asarray(scores, dtype=np.float64)


def normalized_score(score, random_score: float, expert_score: float):
    """100 * (score - random) / (expert - random); expert -> 100, random -> 0."""
    if expert_score <= random_score:
        raise ValueError("expert_score must exceed random_score")
    score = np.asarray(score, dtype=np.float64)
    out = 100.0 * (score - random_score) / (expert_score - random_score)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class EvalReport:
    scores: tuple
    mean: float
    std: float
    normalized_mean: float
    normalized_std: float
    seed: int
    config_hash: str

    def as_dict(self) -> dict:
        return {"scores": list(self.scores), "mean": self.mean,
                "std": self.std, "normalized_mean": self.normalized_mean,
                "normalized_std": self.normalized_std, "seed": self.seed,
                "config_hash": self.config_hash}


def evaluate_with_report(env, policy, episodes: int, seed: int,
                         config_obj=None) -> EvalReport:
    scores = evaluate_policy(env, policy, episodes, seed)
    normed = normalized_score(scores, env.spec.random_score,
                              env.spec.expert_score)
    return EvalReport(scores=tuple(float(v) for v in scores),
                      mean=float(scores.mean()), std=float(scores.std()),
                      normalized_mean=float(np.mean(normed)),
                      normalized_std=float(np.std(normed)),
                      seed=seed,
                      config_hash=config_digest(config_obj or {}))


# ---------------------------------------------------------------------------
# Distribution similarity (Table-3-style metrics)
# ---------------------------------------------------------------------------

def ks_statistic(a, b) -> float:
    """Two-sample Kolmogorov-Smirnov statistic sup_x |ECDF_a - ECDF_b|."""
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    if len(a) == 0 or len(b) == 0:
        raise ValueError("samples must be nonempty")
    grid = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, grid, side="right") / len(a)
    cdf_b = np.searchsorted(b, grid, side="right") / len(b)
    return float(np.max(np.abs(cdf_a - cdf_b)))


def ks_marginal(sample_a, sample_b) -> float:
    """1 - mean per-dimension KS statistic; identical marginals score 1."""
    a = np.atleast_2d(np.asarray(sample_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(sample_b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise ValueError("samples disagree on feature dimension")
    stats = [ks_statistic(a[:, j], b[:, j]) for j in range(a.shape[1])]
    return 1.0 - float(np.mean(stats))


def _upper_triangle_corr(sample: np.ndarray) -> np.ndarray:
    corr = np.corrcoef(sample, rowvar=False)
    corr = np.nan_to_num(corr, nan=0.0)  # constant features contribute 0
    iu = np.triu_indices(corr.shape[0], k=1)
    return corr[iu]


def correlation_similarity(sample_a, sample_b) -> float:
    """Pearson correlation between the upper-triangular feature-correlation
    matrices of the two samples."""
    a = np.atleast_2d(np.asarray(sample_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(sample_b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise ValueError("samples disagree on feature dimension")
    ua, ub = _upper_triangle_corr(a), _upper_triangle_corr(b)
    if np.array_equal(ua, ub):
        return 1.0
    if ua.std() == 0.0 or ub.std() == 0.0 or len(ua) < 2:
        return 0.0
    return float(np.corrcoef(ua, ub)[0, 1])


@dataclass(frozen=True)
class SimilarityReport:
    marginal: float
    correlation: float

    def as_dict(self) -> dict:
        return {"marginal": self.marginal, "correlation": self.correlation}


def similarity_report(sample_a, sample_b) -> SimilarityReport:
    return SimilarityReport(marginal=ks_marginal(sample_a, sample_b),
                            correlation=correlation_similarity(sample_a,
                                                               sample_b))


def spearman_rho(x, y) -> float:
    """Spearman rank correlation (average ranks for ties)."""
    def ranks(v):
        v = np.asarray(v, dtype=np.float64)
        order = np.argsort(v, kind="stable")
        r = np.empty(len(v))
        r[order] = np.arange(1, len(v) + 1)
        for value in np.unique(v):
            mask = v == value
            r[mask] = r[mask].mean()
        return r

    rx, ry = ranks(x), ranks(y)
    if rx.std() == 0 or ry.std() == 0:
        return 0.0
    return float(np.corrcoef(rx, ry)[0, 1])


def align_table(rows: list[dict]) -> str:
    """Aligned-column human-readable table of homogeneous row dicts."""
    if not rows:
        return "(empty)"
    keys = list(rows[0])
    cells = [[("%g" % row[k]) if isinstance(row[k], float) else str(row[k])
              for k in keys] for row in rows]
    widths = [max(len(k), *(len(c[i]) for c in cells))
              for i, k in enumerate(keys)]
    lines = ["  ".join(k.ljust(w) for k, w in zip(keys, widths))]
    for c in cells:
        lines.append("  ".join(v.ljust(w) for v, w in zip(c, widths)))
    return "\n".join(lines)
