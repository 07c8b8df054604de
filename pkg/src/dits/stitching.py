"""Trajectory stitching: blend generated trajectories into the offline pool by
creating cross-trajectory transitions gated by neighborhood, dynamics and value
tests, with diffuser-imputed rewards, acceptance thresholding, top-T truncation
and the final return filter.

Stitching operates on raw-unit datasets; the ModelBundle hides normalization.
Walk decisions never depend on imputed rewards, so rewards of stitched
transitions are filled in one batched reverse chain per epoch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, Trajectory
from .diffusion import SamplerParams
from .generation import GenerationConfig, generate_batch
from .models import ModelBundle


@dataclass(frozen=True)
class StitchConfig:
    epochs: int = 2
    n_per_epoch: int = 300
    rho: float = 0.1
    p_tilde: float = 0.1
    kappa_frac: float = 0.5
    gamma: float = 0.99
    omega: float = 1.4
    omega_impute: float = 0.0
    alpha_temp: float = 0.5
    alpha_temp_impute: float = 0.0
    target_y: float = 0.9
    max_walk_len: int = 100
    context: int = 4
    horizon: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("stitching needs epochs >= 1")
        if self.rho <= 0:
            raise ValueError("rho must be > 0")
        if self.p_tilde < 0:
            raise ValueError("p_tilde must be >= 0")
        if self.n_per_epoch < 0:
            raise ValueError("n_per_epoch must be >= 0")

    def impute_params(self) -> SamplerParams:
        """Reward-imputation sampler, guided separately from generation:
        omega_impute = 0 keeps imputed rewards unbiased by the return
        condition, and the deterministic chain (alpha_temp_impute = 0)
        returns the posterior mode instead of a sample."""
        return SamplerParams(omega=self.omega_impute,
                             alpha_temp=self.alpha_temp_impute,
                             target_y=self.target_y)


class StateIndex:
    """Exact L2 radius lookup over every state occurrence of a dataset.

    Occurrences are (trajectory id, step) with step indexing the trajectory's
    states array, so final next-states are covered once. A uniform grid with
    cell size rho backs queries; a linear scan is used for high dimensions.
    """

    GRID_DIM_LIMIT = 4

    def __init__(self, dataset: Dataset):
        ids = []
        for tid, traj in enumerate(dataset):
            for step in range(len(traj.states)):
                ids.append((tid, step))
        self.ids = ids
        self._rows = {occ: row for row, occ in enumerate(ids)}
        self.states = (dataset.all_states().astype(np.float64)
                       if ids else np.zeros((0, dataset.state_dim)))
        self._grids: dict[float, dict] = {}

    def state(self, tid: int, step: int) -> np.ndarray:
        return self.states[self._rows[(tid, step)]].astype(np.float32)

    def _grid_for(self, rho: float) -> dict:
        grid = self._grids.get(rho)
        if grid is None:
            grid = {}
            cells = np.floor(self.states / rho).astype(np.int64)
            for idx, cell in enumerate(map(tuple, cells)):
                grid.setdefault(cell, []).append(idx)
            self._grids[rho] = grid
        return grid

    def query(self, s, rho: float, exclude=None) -> list:
        """Occurrences strictly within L2 distance rho of s, sorted by
        (trajectory id, step); the excluded occurrence is dropped even when
        other occurrences share its coordinates."""
        s = np.asarray(s, dtype=np.float64)
        if len(self.states) == 0:
            return []
        if s.shape[0] <= self.GRID_DIM_LIMIT:
            candidates = self._grid_candidates(s, rho)
        else:
            candidates = np.arange(len(self.states))
        if len(candidates) == 0:
            return []
        dists = np.linalg.norm(self.states[candidates] - s, axis=1)
        hits = [int(candidates[j]) for j in np.nonzero(dists < rho)[0]]
        out = [self.ids[h] for h in hits if self.ids[h] != exclude]
        out.sort()
        return out

    def _grid_candidates(self, s, rho: float) -> np.ndarray:
        grid = self._grid_for(rho)
        base = np.floor(s / rho).astype(np.int64)
        m = len(base)
        hits: list[int] = []
        for offset in np.ndindex(*(3,) * m):
            cell = tuple(base + np.asarray(offset) - 1)
            hits.extend(grid.get(cell, ()))
        return np.asarray(sorted(hits), dtype=np.int64)


def _index_state(dataset: Dataset, occ) -> np.ndarray:
    tid, step = occ
    return dataset.trajectories[tid].states[step]


def neighborhood(index: StateIndex, s_prime, rho: float,
                 exclude=None) -> list:
    """Open-ball radius query around an observed next state."""
    return index.query(s_prime, rho, exclude=exclude)


def select_candidate(candidates, values):
    """Candidate with maximal value; ties break on (trajectory id, step)."""
    if len(candidates) == 0:
        return None
    values = np.asarray(values, dtype=np.float64)
    best = 0
    for j in range(1, len(candidates)):
        if values[j] > values[best]:
            best = j
    return candidates[best]


def log_mean_exp(values) -> float:
    values = np.asarray(values, dtype=np.float64)
    peak = values.max()
    return float(peak + np.log(np.mean(np.exp(values - peak))))


def dynamics_criterion(logp_candidate, logp_observed) -> bool:
    """Conservative test: min member density at the candidate must exceed the
    mean member density at the observed next state (log-space)."""
    return float(np.min(logp_candidate)) > log_mean_exp(logp_observed)


def acceptance_improved(new_sum: float, old_sum: float,
                        p_tilde: float) -> bool:
    """Signed-margin form of the (1 + p~) acceptance rule; reduces to
    new > (1 + p~) * old for non-negative old sums."""
    return new_sum > old_sum + p_tilde * abs(old_sum)


@dataclass
class StitchRecord:
    """Provenance of one stitched transition, re-checkable after the fact."""

    position: int
    src: tuple
    observed_next: tuple
    candidate: tuple
    distance: float
    value_observed: float
    value_candidate: float
    min_logp_candidate: float
    mean_logp_observed: float

    def as_dict(self) -> dict:
        return {
            "position": self.position,
            "src": list(self.src),
            "observed_next": list(self.observed_next),
            "candidate": list(self.candidate),
            "distance": self.distance,
            "value_observed": self.value_observed,
            "value_candidate": self.value_candidate,
            "min_logp_candidate": self.min_logp_candidate,
            "mean_logp_observed": self.mean_logp_observed,
        }


@dataclass
class _Walk:
    steps: list = field(default_factory=list)   # (s, a, r|None, s_next)
    records: list = field(default_factory=list)
    pending: list = field(default_factory=list)  # (step position, s, s_hat)
    terminated: bool = False
    stitched: bool = False


def _walk_trajectory(tid: int, dataset: Dataset, index: StateIndex,
                     bundle, config: StitchConfig) -> _Walk:
    """One stitched walk starting at trajectory tid's first transition.

    Revisiting an occupied (trajectory, step) within the walk is forbidden,
    which together with the length cap guarantees termination.
    """
    walk = _Walk()
    trajs = dataset.trajectories
    host, i = tid, 0
    visited = {(host, i)}
    while i < len(trajs[host]) and len(walk.steps) < config.max_walk_len:
        traj = trajs[host]
        s, s_prime = traj.states[i], traj.states[i + 1]
        candidates = neighborhood(index, s_prime, config.rho,
                                  exclude=(host, i + 1))
        chosen = None
        if candidates:
            cand_states = np.stack([_index_state(dataset, occ)
                                    for occ in candidates])
            cand_values = bundle.state_values(cand_states)
            best = select_candidate(candidates, cand_values)
            best_state = _index_state(dataset, best)
            value_cand = float(cand_values[candidates.index(best)])
            value_obs = bundle.state_value(s_prime)
            if best not in visited and value_cand > value_obs:
                logp_cand = bundle.candidate_log_densities(s, best_state)
                logp_obs = bundle.candidate_log_densities(s, s_prime)
                if dynamics_criterion(logp_cand, logp_obs):
                    chosen = (best, best_state, value_cand, value_obs,
                              logp_cand, logp_obs)
        if chosen is not None:
            best, best_state, value_cand, value_obs, logp_cand, logp_obs = chosen
            action = np.asarray(bundle.predict_action(s, best_state),
                                dtype=np.float32).reshape(-1)
            position = len(walk.steps)
            walk.steps.append([s, action, None, best_state])
            walk.pending.append((position, s, best_state))
            walk.records.append(StitchRecord(
                position=position, src=(host, i), observed_next=(host, i + 1),
                candidate=best,
                distance=float(np.linalg.norm(
                    best_state.astype(np.float64)
                    - s_prime.astype(np.float64))),
                value_observed=float(value_obs),
                value_candidate=float(value_cand),
                min_logp_candidate=float(np.min(logp_cand)),
                mean_logp_observed=log_mean_exp(logp_obs)))
            walk.stitched = True
            host, i = best
        else:
            walk.steps.append([s, traj.actions[i], float(traj.rewards[i]),
                               s_prime])
            i += 1
        visited.add((host, i))
    ended_at_terminal = (i >= len(trajs[host])) and trajs[host].terminated
    walk.terminated = bool(ended_at_terminal)
    return walk


def _walk_to_trajectory(walk: _Walk, template: Trajectory) -> Trajectory:
    states = np.stack([walk.steps[0][0]] + [st[3] for st in walk.steps])
    return Trajectory(states,
                      np.stack([st[1] for st in walk.steps]),
                      np.asarray([st[2] for st in walk.steps],
                                 dtype=np.float32),
                      terminated=walk.terminated, source="stitched",
                      policy=template.policy)


def stitch_trajectory(tid: int, dataset: Dataset, index: StateIndex, bundle,
                      config: StitchConfig, reward_seed: int = 0) -> Trajectory:
    """Stitched counterpart of trajectory tid; the original object is returned
    unchanged when no stitch is admissible."""
    walk = _walk_trajectory(tid, dataset, index, bundle, config)
    original = dataset.trajectories[tid]
    if not walk.stitched:
        return original
    _fill_pending_rewards([walk], bundle, config, reward_seed)
    return _walk_to_trajectory(walk, original)


def _fill_pending_rewards(walks, bundle, config: StitchConfig,
                          seed: int) -> None:
    pairs = [(w, pos, s, s_hat) for w in walks for pos, s, s_hat in w.pending]
    if not pairs:
        return
    s = np.stack([p[2] for p in pairs])
    s_hat = np.stack([p[3] for p in pairs])
    rewards = bundle.impute_rewards(s, s_hat, config.impute_params(), seed)
    for (walk, pos, _, _), r in zip(pairs, np.atleast_1d(rewards)):
        walk.steps[pos][2] = float(r)


def stitch_epoch(dataset: Dataset, bundle, config: StitchConfig, T: int,
                 epoch: int, env_factory=None) -> tuple[Dataset, dict]:
    """One Algorithm-4 epoch: generate, merge, retrain value, stitch every
    trajectory, apply acceptance, sort by reward sum, keep the top T."""
    from .data import normalize

    epoch_seed = config.seed + 7919 * (epoch + 1)
    generated = None
    if config.n_per_epoch > 0:
        if env_factory is None:
            raise ValueError("n_per_epoch > 0 requires an env_factory")
        gen_config = GenerationConfig(
            context=config.context, horizon=config.horizon,
            omega=config.omega, alpha_temp=config.alpha_temp,
            target_y=config.target_y, n_traj=config.n_per_epoch,
            seed=epoch_seed)
        generated = generate_batch(env_factory, bundle, gen_config)

    pool = list(dataset.trajectories)
    if generated is not None:
        pool.extend(generated.trajectories)
    merged = Dataset(pool, state_dim=dataset.state_dim,
                     action_dim=dataset.action_dim)

    if isinstance(bundle, ModelBundle):
        bundle.refit_value(normalize(merged, bundle.stats.horizon,
                                     bundle.stats.gamma,
                                     stats=bundle.stats))
    else:
        bundle.refit_value(merged)

    index = StateIndex(merged)
    walks = [_walk_trajectory(tid, merged, index, bundle, config)
             for tid in range(len(merged))]
    _fill_pending_rewards(walks, bundle, config, epoch_seed + 1)

    accepted = 0
    rejected = 0
    out = []
    records = {}
    acceptance = {}
    for tid, walk in enumerate(walks):
        original = merged.trajectories[tid]
        if not walk.stitched:
            out.append(original)
            continue
        records[tid] = [r.as_dict() for r in walk.records]
        stitched = _walk_to_trajectory(walk, original)
        ok = acceptance_improved(stitched.reward_sum(),
                                 original.reward_sum(), config.p_tilde)
        acceptance[tid] = ok
        if ok:
            out.append(stitched)
            accepted += 1
        else:
            out.append(original)
            rejected += 1

    order = sorted(range(len(out)),
                   key=lambda j: (-out[j].reward_sum(), j))
    keep = order[:T]
    top = [out[j] for j in keep]
    info = {
        "epoch": epoch,
        "n_generated": 0 if generated is None else len(generated),
        "pool_size": len(merged),
        "stitched_accepted": accepted,
        "stitched_rejected": rejected,
        "stitched_transitions": sum(
            len(r) for tid, r in records.items() if acceptance[tid]),
        "kept_indices": keep,
        "records": records,
        "acceptance": acceptance,
    }
    return Dataset(top, state_dim=dataset.state_dim,
                   action_dim=dataset.action_dim), info


def lambda_filter(dataset: Dataset, kappa_frac: float) -> tuple[Dataset, dict]:
    """Keep trajectories with reward sum strictly above max - kappa, where
    kappa = kappa_frac * (max - min) of the pool's reward sums."""
    sums = np.asarray([t.reward_sum() for t in dataset], dtype=np.float64)
    spread = float(sums.max() - sums.min()) if len(sums) else 0.0
    kappa = kappa_frac * spread
    threshold = float(sums.max()) - kappa if len(sums) else 0.0
    kept = [t for t, s in zip(dataset.trajectories, sums) if s > threshold]
    if not kept:
        raise ValueError(
            f"lambda filter removed every trajectory (threshold {threshold}); "
            "increase kappa_frac")
    info = {"kappa": kappa, "lambda": threshold,
            "n_kept": len(kept), "n_dropped": len(dataset) - len(kept)}
    return Dataset(kept, state_dim=dataset.state_dim,
                   action_dim=dataset.action_dim), info
