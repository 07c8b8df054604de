"""Non-diffusion learned components: inverse dynamics, Gaussian dynamics
ensemble, and the twin value function, plus the ModelBundle that ties them to a
normalization and exposes raw-unit helpers to generation and stitching.

All training losses follow the written objectives exactly (the value loss
differentiates both Bellman terms), so every loss passes the central
finite-difference gradient check.
"""

from __future__ import annotations

import inspect
import math
import os

import numpy as np
import torch

from .data import Dataset, NormStats
from .nets import (adam_train, flat_params, load_checkpoint, make_mlp,
                   save_checkpoint, set_flat_params)


class ParamsMixin:
    """sklearn-style get_params/set_params/clone from the __init__ signature."""

    def get_params(self) -> dict:
        names = [n for n in inspect.signature(type(self).__init__).parameters
                 if n != "self"]
        return {n: getattr(self, n) for n in names}

    def set_params(self, **params):
        valid = self.get_params()
        for key, value in params.items():
            if key not in valid:
                raise ValueError(f"unknown parameter {key!r} for "
                                 f"{type(self).__name__}")
            setattr(self, key, value)
        return self

    def clone(self):
        return type(self)(**self.get_params())


def transition_arrays(dataset: Dataset):
    """Stack transitions into torch tensors (s, a, r, s', terminal, raw_r).

    ``terminal`` marks only the final transition of trajectories that ended by
    termination (not truncation); ``raw_r`` undoes reward normalization.
    """
    s, a, r, s_next, terminal = [], [], [], [], []
    for traj in dataset:
        s.append(traj.states[:-1])
        a.append(traj.actions)
        r.append(traj.rewards)
        s_next.append(traj.states[1:])
        flags = np.zeros(len(traj), dtype=np.float32)
        if traj.terminated:
            flags[-1] = 1.0
        terminal.append(flags)
    r_cat = np.concatenate(r)
    stats = dataset.norm_stats
    raw_r = stats.denormalize_rewards(r_cat) if stats is not None else r_cat
    return {
        "s": torch.from_numpy(np.concatenate(s)),
        "a": torch.from_numpy(np.concatenate(a)),
        "r": torch.from_numpy(r_cat),
        "raw_r": torch.from_numpy(np.asarray(raw_r, dtype=np.float32)),
        "s_next": torch.from_numpy(np.concatenate(s_next)),
        "terminal": torch.from_numpy(np.concatenate(terminal)),
    }


def _require_normalized(dataset: Dataset):
    if dataset.norm_stats is None:
        raise ValueError("model training expects a normalized dataset")


def _holdout_split(n: int, frac: float, seed: int):
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_holdout = max(1, int(round(frac * n))) if n > 1 else 0
    return perm[n_holdout:], perm[:n_holdout]


def _batch_stream(n: int, batch_size: int, seed: int):
    rng = np.random.default_rng(seed)

    def make_batch(step):
        return rng.integers(0, n, size=min(batch_size, n))

    return make_batch


def idm_loss(net, s, s_next, a) -> torch.Tensor:
    pred = net(torch.cat([s, s_next], dim=-1))
    return ((pred - a) ** 2).sum(dim=-1).mean()


def gaussian_nll_loss(net, s, s_next, logvar_min=-10.0, logvar_max=4.0):
    """Per Eq. for the dynamics MLE loss: squared Mahalanobis term + log-det."""
    mu, logvar = gaussian_head(net, s, logvar_min, logvar_max)
    inv_var = torch.exp(-logvar)
    return (((mu - s_next) ** 2 * inv_var).sum(dim=-1)
            + logvar.sum(dim=-1)).mean()


def gaussian_head(net, s, logvar_min=-10.0, logvar_max=4.0):
    out = net(s)
    mu, logvar = out.chunk(2, dim=-1)
    return mu, torch.clamp(logvar, logvar_min, logvar_max)


def gaussian_log_density(mu, logvar, x):
    """Exact diagonal-Gaussian log density log N(x; mu, diag(exp(logvar)))."""
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    m = mu.shape[-1]
    quad = ((x - mu) ** 2 * np.exp(-logvar)).sum(axis=-1)
    return -0.5 * (m * math.log(2 * math.pi) + logvar.sum(axis=-1) + quad)


def bellman_loss(net, s, raw_r, s_next, terminal, gamma) -> torch.Tensor:
    """Residual Bellman loss; both V(s) and V(s') carry gradient, and
    terminal transitions regress onto the raw reward alone."""
    v = net(s).squeeze(-1)
    v_next = net(s_next).squeeze(-1)
    target = raw_r + gamma * (1.0 - terminal) * v_next
    return ((target - v) ** 2).mean()


class InverseDynamicsModel(ParamsMixin):
    """MLP f(s, s') -> a trained with the squared-error objective."""

    def __init__(self, hidden=(512, 512), lr=2e-4, batch_size=32,
                 steps=20_000, holdout_frac=0.1, seed=0):
        self.hidden = tuple(hidden)
        self.lr = lr
        self.batch_size = batch_size
        self.steps = steps
        self.holdout_frac = holdout_frac
        self.seed = seed
        self.net_ = None
        self.state_dim_ = None
        self.action_dim_ = None
        self.report_ = {}

    def fit(self, dataset: Dataset):
        _require_normalized(dataset)
        arrays = transition_arrays(dataset)
        n = len(arrays["s"])
        train_idx, holdout_idx = _holdout_split(n, self.holdout_frac, self.seed)
        self.state_dim_ = dataset.state_dim
        self.action_dim_ = dataset.action_dim
        self.net_ = make_mlp(2 * dataset.state_dim, self.hidden,
                             dataset.action_dim, seed=self.seed)

        s, ss, a = arrays["s"], arrays["s_next"], arrays["a"]
        make_batch = _batch_stream(len(train_idx), self.batch_size,
                                   self.seed + 1)

        def loss_fn(net, batch):
            idx = train_idx[batch]
            return idm_loss(net, s[idx], ss[idx], a[idx])

        losses, _ = adam_train(self.net_, make_batch, loss_fn,
                               self.steps, self.lr)
        with torch.no_grad():
            hold = (idm_loss(self.net_, s[holdout_idx], ss[holdout_idx],
                             a[holdout_idx]) if len(holdout_idx)
                    else torch.tensor(float("nan")))
            train_final = idm_loss(self.net_, s[train_idx], ss[train_idx],
                                   a[train_idx])
        self.report_ = {"final_train_loss": float(train_final),
                        "holdout_loss": float(hold),
                        "last_batch_loss": losses[-1] if losses else None}
        return self

    def predict(self, s, s_next) -> np.ndarray:
        if self.net_ is None:
            raise RuntimeError("model is not fitted")
        s = np.atleast_2d(np.asarray(s, dtype=np.float32))
        s_next = np.atleast_2d(np.asarray(s_next, dtype=np.float32))
        if s.shape[1] != self.state_dim_ or s_next.shape[1] != self.state_dim_:
            raise ValueError(
                f"expected state dim {self.state_dim_}, got {s.shape[1]} "
                f"and {s_next.shape[1]}")
        with torch.no_grad():
            out = self.net_(torch.from_numpy(np.concatenate([s, s_next],
                                                            axis=1)))
        return out.numpy().squeeze(0) if out.shape[0] == 1 else out.numpy()


class GaussianDynamicsEnsemble(ParamsMixin):
    """N Gaussian dynamics models s -> N(mu, diag); best n_select kept by
    held-out NLL. Log-variances are clamped to [logvar_min, logvar_max]."""

    def __init__(self, n_members=7, n_select=3, hidden=(300, 300, 300),
                 lr=3e-4, batch_size=256, steps=20_000, holdout_frac=0.1,
                 logvar_min=-10.0, logvar_max=4.0, eval_interval=0, seed=0):
        self.n_members = n_members
        self.n_select = n_select
        self.hidden = tuple(hidden)
        self.lr = lr
        self.batch_size = batch_size
        self.steps = steps
        self.holdout_frac = holdout_frac
        self.logvar_min = logvar_min
        self.logvar_max = logvar_max
        self.eval_interval = eval_interval
        self.seed = seed
        self.members_ = None
        self.selected_ = None
        self.state_dim_ = None
        self.holdout_nll_ = None
        self.holdout_history_ = None
        self.report_ = {}

    def fit(self, dataset: Dataset):
        _require_normalized(dataset)
        arrays = transition_arrays(dataset)
        n = len(arrays["s"])
        train_idx, holdout_idx = _holdout_split(n, self.holdout_frac, self.seed)
        self.state_dim_ = dataset.state_dim
        s, ss = arrays["s"], arrays["s_next"]

        def holdout_nll(net):
            if not len(holdout_idx):
                return float("nan")
            with torch.no_grad():
                mu, logvar = gaussian_head(net, s[holdout_idx],
                                           self.logvar_min, self.logvar_max)
            dens = gaussian_log_density(mu.numpy(), logvar.numpy(),
                                        ss[holdout_idx].numpy())
            return float(-np.mean(dens))

        self.members_ = []
        self.holdout_history_ = []
        nlls = []
        for i in range(self.n_members):
            member_seed = self.seed + 1000 * (i + 1)
            net = make_mlp(dataset.state_dim, self.hidden,
                           2 * dataset.state_dim, seed=member_seed)
            make_batch = _batch_stream(len(train_idx), self.batch_size,
                                       member_seed + 1)

            def loss_fn(net, batch):
                idx = train_idx[batch]
                return gaussian_nll_loss(net, s[idx], ss[idx],
                                         self.logvar_min, self.logvar_max)

            _, history = adam_train(net, make_batch, loss_fn, self.steps,
                                    self.lr, eval_fn=holdout_nll,
                                    eval_interval=self.eval_interval)
            self.members_.append(net)
            self.holdout_history_.append(history)
            nlls.append(holdout_nll(net))
        order = np.argsort(nlls, kind="stable")
        self.selected_ = [int(i) for i in order[:self.n_select]]
        self.holdout_nll_ = [float(v) for v in nlls]
        self.report_ = {"holdout_nll": self.holdout_nll_,
                        "selected": self.selected_}
        return self

    def member_stats(self, member_i: int, s):
        """(mu, logvar) of one member, numpy in/out."""
        net = self.members_[member_i]
        s = np.atleast_2d(np.asarray(s, dtype=np.float32))
        with torch.no_grad():
            mu, logvar = gaussian_head(net, torch.from_numpy(s),
                                       self.logvar_min, self.logvar_max)
        return mu.numpy(), logvar.numpy()

    def log_density(self, member_i: int, s, s_next) -> float:
        if self.selected_ is not None and member_i not in self.selected_:
            raise ValueError(f"member {member_i} is not among the selected "
                             f"members {self.selected_}")
        mu, logvar = self.member_stats(member_i, s)
        dens = gaussian_log_density(mu, logvar,
                                    np.atleast_2d(np.asarray(s_next)))
        return float(dens[0]) if dens.shape == (1,) else dens

    def selected_log_densities(self, s, s_next) -> np.ndarray:
        """Log densities of the selected members; batched over rows of s."""
        s = np.atleast_2d(np.asarray(s, dtype=np.float32))
        s_next = np.atleast_2d(np.asarray(s_next, dtype=np.float32))
        out = []
        for i in self.selected_:
            mu, logvar = self.member_stats(i, s)
            out.append(gaussian_log_density(mu, logvar, s_next))
        return np.stack(out, axis=0)


class TwinValueFunction(ParamsMixin):
    """Two independently initialized value MLPs; evaluation takes their min.

    Targets use raw (denormalized) rewards; inputs are normalized states.
    """

    def __init__(self, hidden=(256, 256), gamma=0.99, lr=3e-4, batch_size=256,
                 steps=20_000, holdout_frac=0.1, seed=0):
        self.hidden = tuple(hidden)
        self.gamma = gamma
        self.lr = lr
        self.batch_size = batch_size
        self.steps = steps
        self.holdout_frac = holdout_frac
        self.seed = seed
        self.heads_ = None
        self.state_dim_ = None
        self.report_ = {}

    def fit(self, dataset: Dataset):
        _require_normalized(dataset)
        arrays = transition_arrays(dataset)
        n = len(arrays["s"])
        train_idx, holdout_idx = _holdout_split(n, self.holdout_frac, self.seed)
        self.state_dim_ = dataset.state_dim
        s, ss = arrays["s"], arrays["s_next"]
        r, term = arrays["raw_r"], arrays["terminal"]

        self.heads_ = []
        holdouts = []
        for head in range(2):
            head_seed = self.seed + 500 * (head + 1)
            net = make_mlp(dataset.state_dim, self.hidden, 1, seed=head_seed)
            make_batch = _batch_stream(len(train_idx), self.batch_size,
                                       head_seed + 1)

            def loss_fn(net, batch):
                idx = train_idx[batch]
                return bellman_loss(net, s[idx], r[idx], ss[idx], term[idx],
                                    self.gamma)

            adam_train(net, make_batch, loss_fn, self.steps, self.lr)
            with torch.no_grad():
                hold = (bellman_loss(net, s[holdout_idx], r[holdout_idx],
                                     ss[holdout_idx], term[holdout_idx],
                                     self.gamma) if len(holdout_idx)
                        else torch.tensor(float("nan")))
            holdouts.append(float(hold))
            self.heads_.append(net)
        self.report_ = {"holdout_td_residual": holdouts}
        return self

    def value(self, s):
        """Elementwise minimum of the two heads; scalar for a single state."""
        if self.heads_ is None:
            raise RuntimeError("model is not fitted")
        s = np.atleast_2d(np.asarray(s, dtype=np.float32))
        with torch.no_grad():
            t = torch.from_numpy(s)
            v = torch.minimum(self.heads_[0](t).squeeze(-1),
                              self.heads_[1](t).squeeze(-1))
        out = v.numpy()
        return float(out[0]) if out.shape == (1,) else out


class ModelBundle:
    """Trained components plus the normalization; raw-unit entry points.

    Generation and stitching talk to the bundle only, so oracle stubs with the
    same surface can replace it in tests.
    """

    def __init__(self, stats: NormStats, idm: InverseDynamicsModel,
                 ensemble: GaussianDynamicsEnsemble, value: TwinValueFunction,
                 diffuser=None):
        self.stats = stats
        self.idm = idm
        self.ensemble = ensemble
        self.value = value
        self.diffuser = diffuser

    def predict_action(self, s, s_next) -> np.ndarray:
        return self.idm.predict(self.stats.normalize_states(s),
                                self.stats.normalize_states(s_next))

    def state_values(self, states) -> np.ndarray:
        return np.atleast_1d(
            self.value.value(self.stats.normalize_states(states)))

    def state_value(self, s) -> float:
        return float(self.state_values(np.atleast_2d(s))[0])

    def candidate_log_densities(self, s, s_next) -> np.ndarray:
        """Selected-member log densities of s -> s_next in normalized space."""
        return self.ensemble.selected_log_densities(
            self.stats.normalize_states(np.atleast_2d(s)),
            self.stats.normalize_states(np.atleast_2d(s_next)))[:, 0]

    def impute_rewards(self, s, s_hat, params, seed: int) -> np.ndarray:
        """Diffuser-imputed rewards for a batch of (s, s_hat) pairs (raw units)."""
        from .diffusion import impute_rewards_batch
        return impute_rewards_batch(self.diffuser, self.stats, s, s_hat,
                                    params, seed)

    def refit_value(self, dataset: Dataset):
        """Retrain the value pair (fresh clone, same config) on a dataset."""
        self.value = self.value.clone().fit(dataset)
        return self

    # -- persistence ---------------------------------------------------------

    def save(self, bundle_dir) -> None:
        os.makedirs(bundle_dir, exist_ok=True)
        digest = self.stats.digest()
        save_checkpoint(
            os.path.join(bundle_dir, "idm.ckpt"), "idm",
            {"hidden": list(self.idm.hidden), "state_dim": self.idm.state_dim_,
             "action_dim": self.idm.action_dim_, "seed": self.idm.seed},
            self.idm.net_, digest)
        save_checkpoint(
            os.path.join(bundle_dir, "dynamics.ckpt"), "dynamics-ensemble",
            {"hidden": list(self.ensemble.hidden),
             "state_dim": self.ensemble.state_dim_,
             "n_members": self.ensemble.n_members,
             "logvar_min": self.ensemble.logvar_min,
             "logvar_max": self.ensemble.logvar_max,
             "seed": self.ensemble.seed},
            self.ensemble.members_, digest,
            extra={"selected": self.ensemble.selected_,
                   "holdout_nll": self.ensemble.holdout_nll_})
        save_checkpoint(
            os.path.join(bundle_dir, "value.ckpt"), "twin-value",
            {"hidden": list(self.value.hidden),
             "state_dim": self.value.state_dim_,
             "gamma": self.value.gamma, "seed": self.value.seed},
            self.value.heads_, digest)
        _save_stats(os.path.join(bundle_dir, "stats.json"), self.stats)
        if self.diffuser is not None:
            self.diffuser.save(os.path.join(bundle_dir, "diffuser.ckpt"),
                               digest)

    @classmethod
    def load(cls, bundle_dir) -> "ModelBundle":
        from .diffusion import WindowDiffusionModel
        stats = _load_stats(os.path.join(bundle_dir, "stats.json"))
        digest = stats.digest()

        header, params = load_checkpoint(os.path.join(bundle_dir, "idm.ckpt"))
        _check_digest(header, digest, "idm")
        arch = header["arch"]
        idm = InverseDynamicsModel(hidden=arch["hidden"], seed=arch["seed"])
        idm.state_dim_ = arch["state_dim"]
        idm.action_dim_ = arch["action_dim"]
        idm.net_ = make_mlp(2 * arch["state_dim"], arch["hidden"],
                            arch["action_dim"], seed=arch["seed"])
        set_flat_params(idm.net_, params)

        header, params = load_checkpoint(
            os.path.join(bundle_dir, "dynamics.ckpt"))
        _check_digest(header, digest, "dynamics")
        arch = header["arch"]
        ens = GaussianDynamicsEnsemble(
            n_members=arch["n_members"], hidden=arch["hidden"],
            logvar_min=arch["logvar_min"], logvar_max=arch["logvar_max"],
            seed=arch["seed"])
        ens.state_dim_ = arch["state_dim"]
        ens.members_ = []
        offset = 0
        for i in range(arch["n_members"]):
            net = make_mlp(arch["state_dim"], arch["hidden"],
                           2 * arch["state_dim"], seed=0)
            n = int(flat_params(net).numel())
            set_flat_params(net, params[offset:offset + n])
            offset += n
            ens.members_.append(net)
        ens.selected_ = [int(i) for i in header["extra"]["selected"]]
        ens.holdout_nll_ = header["extra"]["holdout_nll"]

        header, params = load_checkpoint(os.path.join(bundle_dir, "value.ckpt"))
        _check_digest(header, digest, "value")
        arch = header["arch"]
        value = TwinValueFunction(hidden=arch["hidden"], gamma=arch["gamma"],
                                  seed=arch["seed"])
        value.state_dim_ = arch["state_dim"]
        value.heads_ = []
        offset = 0
        for head in range(2):
            net = make_mlp(arch["state_dim"], arch["hidden"], 1, seed=0)
            n = int(flat_params(net).numel())
            set_flat_params(net, params[offset:offset + n])
            offset += n
            value.heads_.append(net)

        diffuser = None
        diffuser_path = os.path.join(bundle_dir, "diffuser.ckpt")
        if os.path.exists(diffuser_path):
            diffuser = WindowDiffusionModel.load(diffuser_path, digest)
        return cls(stats, idm, ens, value, diffuser)


class StatsMismatchError(RuntimeError):
    """Bundle components were trained against different normalizations."""


def _check_digest(header, digest, name):
    if header["stats_digest"] != digest:
        raise StatsMismatchError(
            f"{name} checkpoint was trained with norm stats "
            f"{header['stats_digest']}, bundle stats are {digest}")


def _save_stats(path, stats: NormStats):
    import json
    payload = {
        "state_mean": [float(v).hex() for v in
                       np.asarray(stats.state_mean, np.float64)],
        "state_std": [float(v).hex() for v in
                      np.asarray(stats.state_std, np.float64)],
        "reward_mean": float(stats.reward_mean).hex(),
        "reward_std": float(stats.reward_std).hex(),
        "return_min": float(stats.return_min).hex(),
        "return_max": float(stats.return_max).hex(),
        "horizon": stats.horizon,
        "gamma": float(stats.gamma).hex(),
        "rewards_normalized": stats.rewards_normalized,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)


def _load_stats(path) -> NormStats:
    import json
    with open(path) as fh:
        payload = json.load(fh)
    return NormStats(
        state_mean=np.asarray([float.fromhex(v) for v in
                               payload["state_mean"]], dtype=np.float32),
        state_std=np.asarray([float.fromhex(v) for v in
                              payload["state_std"]], dtype=np.float32),
        reward_mean=np.float32(float.fromhex(payload["reward_mean"])),
        reward_std=np.float32(float.fromhex(payload["reward_std"])),
        return_min=float.fromhex(payload["return_min"]),
        return_max=float.fromhex(payload["return_max"]),
        horizon=int(payload["horizon"]),
        gamma=float.fromhex(payload["gamma"]),
        rewards_normalized=bool(payload["rewards_normalized"]),
    )
