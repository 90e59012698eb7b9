"""Command-line entry point: ``lcm4rec {simulate,train,eval,exp1,exp2}``."""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click
import numpy as np

from .data import read_dataset, write_dataset
from .distributions import EXPERIMENT_LAWS, named_law
from .evalkit import test_metrics, true_corpus_probs
from .experiments import load_config, run_experiment1, run_experiment2, version_string
from .models import MODEL_KINDS
from .simulator import (
    PROTOCOLS,
    ExposureProtocol,
    GroundTruth,
    choose_treated,
    gen_choices,
    gen_ground_truth,
    plan_split,
    split,
    user_pools,
)
from .trainer import FittedModel, TrainConfig, train as fit

_profile = click.option("--profile", type=click.Choice(["desk", "full"]), default="desk", show_default=True,
                        help="Shipped default settings.")
_config = click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                       help="INI file overriding the profile.")
_seed = click.option("--seed", type=int, help="Master seed.")


def _split_list(value):
    return tuple(v.strip() for v in value.split(",") if v.strip()) if value else None


@click.group()
@click.version_option(version_string(), prog_name="lcm4rec")
@click.option("-v", "--verbose", count=True, help="More logging (repeatable).")
def main(verbose):
    """Learned choice models: simulate data, fit models, run the studies."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@_profile
@_config
@_seed
@click.option("--error-law", type=click.Choice(sorted(EXPERIMENT_LAWS)), default="gumbel", show_default=True)
@click.option("--protocol", type=click.Choice(PROTOCOLS), default="Uniform", show_default=True)
@click.option("--out", type=click.Path(file_okay=False), required=True, help="Output directory.")
def simulate(profile, config_path, seed, error_law, protocol, out):
    """Simulate one dataset and write train/val/test splits plus the ground truth."""
    cfg = load_config(config_path, profile, seed=seed)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    gt = gen_ground_truth(cfg.seed, cfg.n_users, cfg.n_items, cfg.m, named_law(error_law))
    plan = plan_split(cfg.n_users, cfg.n_items, cfg.seed)
    treated = choose_treated(plan.eval_items, cfg.n_treated, cfg.seed) if protocol != "Uniform" else ()
    obs = gen_choices(gt, ExposureProtocol(protocol, treated, cfg.set_size), cfg.choices_per_user, cfg.seed,
                      plan, random_counts=cfg.random_counts)
    parts = split(obs, gt, cfg.seed, plan)
    for name, part in zip(("train", "val", "test"), parts):
        write_dataset(out / f"{name}.jsonl", part)
    gt.save(out / "ground_truth.json")
    meta = {
        "seed": cfg.seed, "error_law": error_law, "protocol": protocol, "treated_items": list(treated),
        "train_users": plan.train_users.tolist(), "eval_users": plan.eval_users.tolist(),
        "train_items": plan.train_items.tolist(), "eval_items": plan.eval_items.tolist(),
        "version": version_string(),
    }
    (out / "split.json").write_text(json.dumps(meta, sort_keys=True))
    click.echo(f"wrote {sum(len(p) for p in parts)} observations to {out}")


def _load_split(data_dir: Path):
    meta = json.loads((data_dir / "split.json").read_text())
    gt = GroundTruth.load(data_dir / "ground_truth.json")
    return meta, gt


@main.command("train")
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False), required=True,
              help="Directory written by 'simulate'.")
@click.option("--model", type=click.Choice(MODEL_KINDS), required=True)
@click.option("--optimizer", type=click.Choice(["sgd", "adam"]), default="adam", show_default=True)
@click.option("--lr", type=float, default=0.01, show_default=True)
@click.option("--max-epochs", type=int, default=50, show_default=True)
@click.option("--batch-size", type=int, default=256, show_default=True)
@click.option("--K", "K", type=int, default=5, show_default=True)
@click.option("--S", "S", type=int, default=5, show_default=True)
@_seed
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Checkpoint file.")
def train_cmd(data_dir, model, optimizer, lr, max_epochs, batch_size, K, S, seed, out):
    """Fit one model on a simulated dataset and save a checkpoint."""
    data_dir = Path(data_dir)
    meta, gt = _load_split(data_dir)
    from .simulator import SplitPlan

    is_eu = np.zeros(gt.n_users, dtype=bool)
    is_eu[meta["eval_users"]] = True
    is_ei = np.zeros(gt.n_items, dtype=bool)
    is_ei[meta["eval_items"]] = True
    plan = SplitPlan(np.array(meta["train_users"]), np.array(meta["eval_users"]), np.array(meta["train_items"]),
                     np.array(meta["eval_items"]), is_eu, is_ei)
    cfg = TrainConfig(model_kind=model, optimizer=optimizer, learning_rate=lr, max_epochs=max_epochs,
                      batch_size=batch_size, K=K, S=S, m=gt.utility.m, seed=meta["seed"] if seed is None else seed)
    fitted = fit(read_dataset(data_dir / "train.jsonl"), read_dataset(data_dir / "val.jsonl"), cfg,
                 gt.n_users, gt.n_items, user_pools(plan, gt.n_items))
    fitted.save(out)
    click.echo(f"{model}: best validation NLL {fitted.best_val_nll:.6f} after {len(fitted.history)} epochs")


@main.command("eval")
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--ndcg-mode", type=click.Choice(["corpus", "per_set"]), default="corpus", show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), help="Write metrics as JSON here.")
def eval_cmd(data_dir, checkpoint, ndcg_mode, out):
    """Score a checkpoint on the test split of a simulated dataset."""
    data_dir = Path(data_dir)
    meta, gt = _load_split(data_dir)
    fitted = FittedModel.load(checkpoint)
    users, items = np.array(meta["eval_users"]), np.array(meta["eval_items"])
    truth = true_corpus_probs(gt, users, items)
    report = test_metrics(fitted, read_dataset(data_dir / "test.jsonl"), gt, users, items, truth, ndcg_mode)
    row = {"model": fitted.model_kind, **report.as_row(), "version": version_string()}
    text = json.dumps(row, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n")
    click.echo(text)


def _experiment(runner, profile, config_path, seed, out, models, error_law, resume, **extra):
    overrides = dict(seed=seed, out=out, models=_split_list(models), error_laws=_split_list(error_law), **extra)
    cfg = load_config(config_path, profile, **overrides)
    result = runner(cfg, resume=resume)
    for f in result.files:
        click.echo(f"wrote {f}")
    for msg in result.failures:
        click.echo(f"FAILED {msg}", err=True)
    sys.exit(0 if result.ok else 1)


_exp_options = [
    _profile,
    _config,
    _seed,
    click.option("--out", type=click.Path(file_okay=False), help="Report directory."),
    click.option("--models", help="Comma-separated model subset."),
    click.option("--error-law", help="Comma-separated error-law subset."),
    click.option("--resume", is_flag=True, help="Reuse finished repetitions found in --out."),
]


def _with_options(fn):
    for opt in reversed(_exp_options):
        fn = opt(fn)
    return fn


@main.command()
@_with_options
def exp1(profile, config_path, seed, out, models, error_law, resume):
    """Accuracy, robustness and error-law recovery on uniformly exposed data."""
    _experiment(run_experiment1, profile, config_path, seed, out, models, error_law, resume)


@main.command()
@_with_options
@click.option("--control", is_flag=True, help="Null protocol: both datasets of a pair are identical.")
def exp2(profile, config_path, seed, out, models, error_law, resume, control):
    """Rank shift of treated items between paired exposure protocols."""
    if models is None:
        models = "MNL,ENL,LCM4Rec"
    _experiment(run_experiment2, profile, config_path, seed, out, models, error_law, resume,
                control=control or None)


if __name__ == "__main__":  # pragma: no cover
    main()
