"""Command-line interface for the full pipeline.

Every stage is deterministic: rerunning a subcommand with the same config and
seed produces bit-identical artifacts in single-threaded mode (the default).
"""

from __future__ import annotations

import json
import os

import click
import numpy as np
import torch

from .config import DitsConfig
from .data import Dataset, load_dataset, save_dataset
from .envs import ENV_NAMES, TIER_NAMES, make_env, state_only, \
    synthesize_offline_dataset
from .evaluation import (BehavioralCloningPolicy, align_table,
                         evaluate_with_report, similarity_report)
from .generation import GenerationConfig, generate_batch
from .models import ModelBundle
from .pipeline import (ABLATION_KINDS, bc_score, run_ablation, run_dits,
                       train_bundle, train_diffuser)


def _load_config(ctx) -> DitsConfig:
    config = ctx.obj["config"]
    if ctx.obj["seed"] is not None:
        config = config.replace(seed=ctx.obj["seed"])
    return config


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True),
              default=None, help="key=value config file")
@click.option("--seed", type=int, default=None, help="override config seed")
@click.option("--threads", type=int, default=1,
              help="torch thread count (1 = deterministic single-threaded)")
@click.pass_context
def main(ctx, config_path, seed, threads):
    torch.set_num_threads(threads)
    ctx.ensure_object(dict)
    ctx.obj["config"] = (DitsConfig.from_file(config_path)
                         if config_path else DitsConfig())
    ctx.obj["seed"] = seed


@main.command("gen-data")
@click.option("--env", "env_name", type=click.Choice(ENV_NAMES),
              required=True)
@click.option("--tier", type=click.Choice(TIER_NAMES), required=True)
@click.option("--n", "n_traj", type=int, required=True)
@click.option("--out", type=click.Path(), required=True)
@click.pass_context
def gen_data(ctx, env_name, tier, n_traj, out):
    """Synthesize an offline dataset under a behavior tier."""
    config = _load_config(ctx)
    dataset = synthesize_offline_dataset(env_name, tier, n_traj, config.seed)
    save_dataset(dataset, out)
    click.echo(f"wrote {len(dataset)} trajectories "
               f"({dataset.n_transitions} transitions) to {out}")


@main.command("train-models")
@click.option("--dataset", "dataset_path", type=click.Path(exists=True),
              required=True)
@click.option("--out", "bundle_dir", type=click.Path(), required=True)
@click.pass_context
def train_models(ctx, dataset_path, bundle_dir):
    """Train IDM, dynamics ensemble and value pair; write a bundle directory."""
    config = _load_config(ctx)
    dataset = load_dataset(dataset_path)
    bundle = train_bundle(dataset, config, with_diffuser=False)
    bundle.save(bundle_dir)
    click.echo(f"bundle written to {bundle_dir}")
    click.echo(json.dumps({"idm": bundle.idm.report_,
                           "dynamics": bundle.ensemble.report_,
                           "value": bundle.value.report_}, indent=1))


@main.command("train-diffuser")
@click.option("--dataset", "dataset_path", type=click.Path(exists=True),
              required=True)
@click.option("--H", "horizon", type=int, default=None,
              help="window length (default from config)")
@click.option("--K", "diffusion_steps", type=int, default=None,
              help="diffusion steps (default from config)")
@click.option("--p", "p_drop", type=float, default=None,
              help="condition dropout probability")
@click.option("--out", type=click.Path(), required=True,
              help="checkpoint file, or a bundle directory to extend")
@click.pass_context
def train_diffuser_cmd(ctx, dataset_path, horizon, diffusion_steps, p_drop,
                       out):
    """Train the return-conditioned window diffuser."""
    from .data import normalize

    config = _load_config(ctx)
    if horizon is not None:
        config = config.replace(horizon=horizon)
    if diffusion_steps is not None:
        config = config.replace(diffusion_steps=diffusion_steps)
    if p_drop is not None:
        config = config.replace(p_drop=p_drop)
    dataset = load_dataset(dataset_path)
    normalized = normalize(dataset, config.horizon, config.gamma,
                           config.normalize_rewards)
    diffuser = train_diffuser(normalized, config)
    path = (os.path.join(out, "diffuser.ckpt") if os.path.isdir(out) else out)
    diffuser.save(path, normalized.norm_stats.digest())
    click.echo(f"diffuser written to {path} "
               f"(final loss {diffuser.loss_history_[-1]:.4f})")


@main.command("generate")
@click.option("--bundle", "bundle_dir", type=click.Path(exists=True),
              required=True)
@click.option("--env", "env_name", type=click.Choice(ENV_NAMES),
              required=True)
@click.option("--n", "n_traj", type=int, default=300)
@click.option("--C", "context", type=int, default=None)
@click.option("--H", "horizon", type=int, default=None)
@click.option("--omega", type=float, default=None)
@click.option("--y", "target_y", type=float, default=None)
@click.option("--out", type=click.Path(), required=True)
@click.pass_context
def generate(ctx, bundle_dir, env_name, n_traj, context, horizon, omega,
             target_y, out):
    """Generate trajectories through state-only interaction (Algorithm-1)."""
    config = _load_config(ctx)
    bundle = ModelBundle.load(bundle_dir)
    gen_config = GenerationConfig(
        context=context or config.context,
        horizon=horizon or config.horizon,
        omega=config.omega if omega is None else omega,
        alpha_temp=config.alpha_temp,
        target_y=config.target_y if target_y is None else target_y,
        n_traj=n_traj, seed=config.seed)
    dataset = generate_batch(lambda: state_only(make_env(env_name)), bundle,
                             gen_config)
    save_dataset(dataset, out)
    click.echo(f"generated {len(dataset)} trajectories to {out}")


@main.command("stitch")
@click.option("--dataset", "dataset_path", type=click.Path(exists=True),
              required=True)
@click.option("--bundle", "bundle_dir", type=click.Path(exists=True),
              required=True)
@click.option("--epochs", type=int, default=None)
@click.option("--rho", type=float, default=None)
@click.option("--p-tilde", type=float, default=None)
@click.option("--kappa", "kappa_frac", type=float, default=None,
              help="kappa as a fraction of the return spread")
@click.option("--n", "n_per_epoch", type=int, default=None)
@click.option("--out", type=click.Path(), required=True)
@click.pass_context
def stitch(ctx, dataset_path, bundle_dir, epochs, rho, p_tilde, kappa_frac,
           n_per_epoch, out):
    """Run stitching epochs plus the final return filter; writes the
    augmented dataset and a .provenance.json sidecar."""
    config = _load_config(ctx)
    overrides = {k: v for k, v in [("stitch_epochs", epochs), ("rho", rho),
                                   ("p_tilde", p_tilde),
                                   ("kappa_frac", kappa_frac),
                                   ("n_per_epoch", n_per_epoch)]
                 if v is not None}
    config = config.replace(**overrides)
    dataset = load_dataset(dataset_path)
    bundle = ModelBundle.load(bundle_dir)
    augmented, report = run_dits(dataset, config, bundle=bundle)
    save_dataset(augmented, out)
    with open(out + ".provenance.json", "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
    click.echo(f"augmented dataset written to {out}")
    click.echo(json.dumps({k: report[k] for k in
                           ("trajectories_by_source",
                            "transitions_by_source")}, indent=1))


@main.command("train-bc")
@click.option("--dataset", "dataset_path", type=click.Path(exists=True),
              required=True)
@click.option("--out", type=click.Path(), required=True)
@click.pass_context
def train_bc(ctx, dataset_path, out):
    """Behavioral cloning on a (possibly augmented) dataset."""
    config = _load_config(ctx)
    dataset = load_dataset(dataset_path)
    policy = BehavioralCloningPolicy(
        hidden=config.hidden_bc, lr=config.lr_bc,
        batch_size=config.batch_bc, steps=config.steps_bc,
        holdout_frac=config.holdout_frac, seed=config.seed).fit(dataset)
    policy.save(out)
    click.echo(f"policy written to {out} "
               f"(holdout mse {policy.report_['holdout_mse']:.5f})")


@main.command("eval")
@click.option("--policy", "policy_path", type=click.Path(exists=True),
              required=True)
@click.option("--env", "env_name", type=click.Choice(ENV_NAMES),
              required=True)
@click.option("--episodes", type=int, default=None)
@click.option("--out", type=click.Path(), default=None)
@click.pass_context
def eval_cmd(ctx, policy_path, env_name, episodes, out):
    """Evaluate a policy with full-reward episodes; prints one JSON report."""
    config = _load_config(ctx)
    policy = BehavioralCloningPolicy.load(policy_path)
    env = make_env(env_name)
    report = evaluate_with_report(env, policy,
                                  episodes or config.eval_episodes,
                                  config.seed, config.asdict())
    click.echo(json.dumps(report.as_dict(), sort_keys=True))
    click.echo(align_table([{"mean": report.mean, "std": report.std,
                             "normalized_mean": report.normalized_mean,
                             "normalized_std": report.normalized_std}]))
    if out:
        with open(out, "w") as fh:
            json.dump(report.as_dict(), fh, indent=1, sort_keys=True)


@main.command("analyze")
@click.option("--dataset-a", type=click.Path(exists=True), required=True)
@click.option("--dataset-b", type=click.Path(exists=True), required=True)
@click.option("--marginal/--no-marginal", default=True)
@click.option("--correlation/--no-correlation", default=True)
@click.option("--out", type=click.Path(), default=None)
def analyze(dataset_a, dataset_b, marginal, correlation, out):
    """KS-marginal and correlation similarity between two datasets'
    transition distributions."""
    a = load_dataset(dataset_a).transition_matrix()
    b = load_dataset(dataset_b).transition_matrix()
    report = similarity_report(a, b)
    payload = {}
    if marginal:
        payload["marginal"] = report.marginal
    if correlation:
        payload["correlation"] = report.correlation
    click.echo(json.dumps(payload, sort_keys=True))
    if out:
        with open(out, "w") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)


@main.command("ablate")
@click.option("--kind", type=click.Choice(ABLATION_KINDS), required=True)
@click.option("--out", type=click.Path(), default=None,
              help="CSV output for the sweep rows")
@click.pass_context
def ablate(ctx, kind, out):
    """Component and sweep ablations; emits (x, mean, std) rows."""
    config = _load_config(ctx)
    result = run_ablation(kind, config)
    click.echo(align_table(result["rows"]))
    click.echo(json.dumps({"kind": kind, "rows": result["rows"]},
                          sort_keys=True))
    if out:
        with open(out, "w") as fh:
            fh.write("x,mean,std\n")
            for row in result["rows"]:
                fh.write(f"{row['x']},{row['mean']},{row['std']}\n")


@main.command("baseline")
@click.option("--dataset", "dataset_path", type=click.Path(exists=True),
              required=True)
@click.pass_context
def baseline(ctx, dataset_path):
    """Convenience: BC-on-dataset normalized score (train + eval in one go)."""
    config = _load_config(ctx)
    dataset = load_dataset(dataset_path)
    score = bc_score(dataset, config, config.seed)
    click.echo(json.dumps({"normalized_mean": score}))


if __name__ == "__main__":
    main()
