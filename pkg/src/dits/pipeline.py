"""End-to-end orchestration: train the model bundle once on the offline data,
run stitching epochs, filter, and hand the augmented dataset to downstream
behavioral cloning. Also hosts the estimator-style DitsAugmenter and the
ablation runners."""

from __future__ import annotations

import numpy as np

from .config import DitsConfig
from .data import Dataset, normalize
from .diffusion import (SamplerParams, WindowDiffusionModel,
                        windows_to_transitions)
from .envs import make_env, state_only, synthesize_offline_dataset
from .evaluation import (BehavioralCloningPolicy, evaluate_policy,
                         normalized_score, similarity_report)
from .generation import GenerationConfig, generate_batch
from .models import (GaussianDynamicsEnsemble, InverseDynamicsModel,
                     ModelBundle, ParamsMixin, TwinValueFunction)
from .stitching import StitchConfig, lambda_filter, stitch_epoch


def train_bundle(dataset: Dataset, config: DitsConfig,
                 with_diffuser: bool = True) -> ModelBundle:
    """Fit IDM, dynamics ensemble, value pair (and diffuser) on raw data."""
    normalized = normalize(dataset, config.horizon, config.gamma,
                           config.normalize_rewards)
    idm = InverseDynamicsModel(
        hidden=config.hidden_idm, lr=config.lr_idm,
        batch_size=config.batch_idm, steps=config.steps_idm,
        holdout_frac=config.holdout_frac, seed=config.seed).fit(normalized)
    ensemble = GaussianDynamicsEnsemble(
        n_members=config.n_members, n_select=config.n_select,
        hidden=config.hidden_dynamics, lr=config.lr_dynamics,
        batch_size=config.batch_dynamics, steps=config.steps_dynamics,
        holdout_frac=config.holdout_frac, logvar_min=config.logvar_min,
        logvar_max=config.logvar_max, seed=config.seed).fit(normalized)
    value = TwinValueFunction(
        hidden=config.hidden_value, gamma=config.gamma, lr=config.lr_value,
        batch_size=config.batch_value, steps=config.steps_value,
        holdout_frac=config.holdout_frac, seed=config.seed).fit(normalized)
    diffuser = None
    if with_diffuser:
        diffuser = train_diffuser(normalized, config)
    return ModelBundle(normalized.norm_stats, idm, ensemble, value, diffuser)


def train_diffuser(normalized: Dataset, config: DitsConfig):
    # context >= 2 keeps the reward imputer's two-state clamp in-distribution
    return WindowDiffusionModel(
        horizon=config.horizon, diffusion_steps=config.diffusion_steps,
        schedule=config.schedule, width=config.width,
        n_blocks=config.n_blocks, emb_dim=config.emb_dim,
        kernel=config.kernel, p_drop=config.p_drop,
        context=max(config.context, 2), lr=config.lr_diffuser,
        batch_size=config.batch_diffuser, steps=config.steps_diffuser,
        seed=config.seed).fit(normalized)


def stitch_config_from(config: DitsConfig, max_walk_len: int) -> StitchConfig:
    return StitchConfig(
        epochs=config.stitch_epochs, n_per_epoch=config.n_per_epoch,
        rho=config.rho, p_tilde=config.p_tilde,
        kappa_frac=config.kappa_frac, gamma=config.gamma,
        omega=config.omega, omega_impute=config.omega_impute,
        alpha_temp=config.alpha_temp,
        alpha_temp_impute=config.alpha_temp_impute,
        target_y=config.target_y,
        max_walk_len=max_walk_len, context=config.context,
        horizon=config.horizon, seed=config.seed)


def run_dits(dataset: Dataset, config: DitsConfig, env_factory=None,
             bundle: ModelBundle | None = None) -> tuple[Dataset, dict]:
    """Full pipeline: bundle trained once on the input dataset (the generator
    is never retrained across epochs), stitching epochs, final return filter.

    Returns the augmented raw-unit dataset plus a provenance report.
    """
    if env_factory is None:
        env_name = config.env
        env_factory = lambda: state_only(make_env(env_name))  # noqa: E731
    probe = env_factory()
    if bundle is None:
        bundle = train_bundle(dataset, config)
    stitch_cfg = stitch_config_from(config, probe.spec.max_episode_len)

    T = len(dataset)
    current = dataset
    epochs = []
    for epoch in range(stitch_cfg.epochs):
        current, info = stitch_epoch(current, bundle, stitch_cfg, T, epoch,
                                     env_factory=env_factory)
        epochs.append(info)
    augmented, filter_info = lambda_filter(current, config.kappa_frac)

    sources = {name: 0 for name in ("offline", "generated", "stitched")}
    transitions = dict(sources)
    for traj in augmented:
        sources[traj.source] += 1
        transitions[traj.source] += len(traj)
    report = {
        "epochs": epochs,
        "filter": filter_info,
        "trajectories_by_source": sources,
        "transitions_by_source": transitions,
        "n_trajectories": len(augmented),
        "n_transitions": augmented.n_transitions,
    }
    return augmented, report


class DitsAugmenter(ParamsMixin):
    """Estimator-style wrapper: fit() trains the bundle on the offline data,
    transform() returns the stitched-and-filtered augmentation of a dataset."""

    def __init__(self, config: DitsConfig | None = None, env_factory=None):
        self.config = config or DitsConfig()
        self.env_factory = env_factory
        self.bundle_ = None
        self.report_ = None

    def _factory(self):
        if self.env_factory is not None:
            return self.env_factory
        env_name = self.config.env
        return lambda: state_only(make_env(env_name))

    def fit(self, dataset: Dataset):
        self.bundle_ = train_bundle(dataset, self.config)
        return self

    def transform(self, dataset: Dataset) -> Dataset:
        if self.bundle_ is None:
            raise RuntimeError("augmenter is not fitted")
        augmented, self.report_ = run_dits(dataset, self.config,
                                           env_factory=self._factory(),
                                           bundle=self.bundle_)
        return augmented

    def fit_transform(self, dataset: Dataset) -> Dataset:
        return self.fit(dataset).transform(dataset)


# ---------------------------------------------------------------------------
# Downstream scoring and ablation runners
# ---------------------------------------------------------------------------

def bc_score(dataset: Dataset, config: DitsConfig, seed: int) -> float:
    """Train BC on a raw dataset and return its mean normalized score."""
    policy = BehavioralCloningPolicy(
        hidden=config.hidden_bc, lr=config.lr_bc,
        batch_size=config.batch_bc, steps=config.steps_bc,
        holdout_frac=config.holdout_frac, seed=seed).fit(dataset)
    env = make_env(config.env)
    scores = evaluate_policy(env, policy, config.eval_episodes, seed)
    return float(np.mean(normalized_score(scores, env.spec.random_score,
                                          env.spec.expert_score)))


def _offline_dataset(config: DitsConfig, seed: int) -> Dataset:
    return synthesize_offline_dataset(config.env, config.tier,
                                      config.n_offline, seed)


ABLATION_KINDS = ("no_stitcher", "no_generator", "n_traj_sweep", "omega_sweep")


def run_ablation(kind: str, config: DitsConfig, seeds=None,
                 sweep_values=None, bundles=None) -> dict:
    """Ablation runners mirroring the component and sweep studies.

    no_stitcher: BC on offline + generated trajectories (no stitching).
    no_generator: full stitching pipeline with n_per_epoch = 0.
    n_traj_sweep: full pipeline across generated-trajectory counts.
    omega_sweep: similarity of conditioned diffuser samples to held-out
    expert transitions across guidance scales.

    ``bundles`` optionally maps seed -> pre-trained ModelBundle to share
    training across runs.
    """
    if kind not in ABLATION_KINDS:
        raise ValueError(f"unknown ablation kind {kind!r}; "
                         f"choose from {ABLATION_KINDS}")
    seeds = list(seeds if seeds is not None else range(config.eval_seeds))
    bundles = bundles or {}
    rows = []

    if kind in ("no_stitcher", "no_generator"):
        per_seed = []
        for seed in seeds:
            run_cfg = config.replace(seed=seed)
            data = _offline_dataset(run_cfg, seed)
            bundle = bundles.get(seed) or train_bundle(data, run_cfg)
            if kind == "no_stitcher":
                gen = generate_batch(
                    lambda: state_only(make_env(run_cfg.env)), bundle,
                    GenerationConfig(
                        context=run_cfg.context, horizon=run_cfg.horizon,
                        omega=run_cfg.omega, alpha_temp=run_cfg.alpha_temp,
                        target_y=run_cfg.target_y,
                        n_traj=run_cfg.n_per_epoch, seed=seed))
                merged = Dataset(list(data.trajectories)
                                 + list(gen.trajectories))
                per_seed.append(bc_score(merged, run_cfg, seed))
            else:
                augmented, _ = run_dits(data,
                                        run_cfg.replace(n_per_epoch=0),
                                        bundle=bundle)
                per_seed.append(bc_score(augmented, run_cfg, seed))
        rows.append({"x": kind, "mean": float(np.mean(per_seed)),
                     "std": float(np.std(per_seed))})
        return {"kind": kind, "rows": rows, "per_seed": per_seed}

    if kind == "n_traj_sweep":
        values = sweep_values or (10, 50, 150, 300)
        per_value = {}
        for n in values:
            scores = []
            for seed in seeds:
                run_cfg = config.replace(seed=seed, n_per_epoch=int(n))
                data = _offline_dataset(run_cfg, seed)
                bundle = bundles.get(seed) or train_bundle(data, run_cfg)
                augmented, _ = run_dits(data, run_cfg, bundle=bundle)
                scores.append(bc_score(augmented, run_cfg, seed))
            per_value[int(n)] = scores
            rows.append({"x": int(n), "mean": float(np.mean(scores)),
                         "std": float(np.std(scores))})
        return {"kind": kind, "rows": rows, "per_value": per_value}

    # omega_sweep: conditioned-sample similarity to expert transitions
    values = sweep_values or (1.2, 1.4, 1.6, 1.8)
    expert_rows = {}
    for omega in values:
        sims = []
        for seed in seeds:
            run_cfg = config.replace(seed=seed, omega=float(omega))
            data = _offline_dataset(run_cfg, seed)
            bundle = bundles.get(seed) or train_bundle(data, run_cfg)
            sims.append(diffuser_expert_similarity(bundle, run_cfg,
                                                   seed).correlation)
        expert_rows[float(omega)] = sims
        rows.append({"x": float(omega), "mean": float(np.mean(sims)),
                     "std": float(np.std(sims))})
    return {"kind": kind, "rows": rows, "per_value": expert_rows}


def diffuser_expert_similarity(bundle: ModelBundle, config: DitsConfig,
                               seed: int, n_windows: int = 128,
                               conditional: bool = True):
    """Similarity of diffuser-sampled transitions to held-out expert-tier
    transitions (the Table-3-style comparison)."""
    from .diffusion import ClampSpec, sample_windows

    diffuser = bundle.diffuser
    params = SamplerParams(omega=config.omega if conditional else 0.0,
                           alpha_temp=config.alpha_temp,
                           target_y=config.target_y)
    seeds = np.random.SeedSequence(seed + 99).generate_state(n_windows)
    rngs = [np.random.default_rng(int(s)) for s in seeds]
    clamps = [ClampSpec() for _ in range(n_windows)]
    windows = sample_windows(diffuser, diffuser.schedule_, clamps, params,
                             rngs, diffuser.horizon, diffuser.state_width)
    rows = windows_to_transitions(windows, diffuser.state_width,
                                  diffuser.horizon)
    stats = bundle.stats
    m = diffuser.state_width
    generated = np.concatenate(
        [stats.denormalize_states(rows[:, :m]),
         np.asarray(stats.denormalize_rewards(rows[:, m]))[:, None],
         stats.denormalize_states(rows[:, m + 1:])], axis=1)

    expert = synthesize_offline_dataset(config.env, "expert",
                                        max(1, config.n_offline // 4),
                                        seed + 7)
    expert_rows = []
    for traj in expert:
        expert_rows.append(np.concatenate(
            [traj.states[:-1], traj.rewards[:, None], traj.states[1:]],
            axis=1))
    expert_rows = np.concatenate(expert_rows)
    n = min(len(generated), len(expert_rows), 10_000)
    return similarity_report(generated[:n], expert_rows[:n])
