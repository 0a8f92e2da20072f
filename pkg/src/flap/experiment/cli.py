"""Command-line entry point: ``flap <subcommand> [--config FILE] [--set section.key=value ...]``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from flap import env as E
from flap import planner as P
from flap.datagen import generate_offline_dataset
from flap.dataset import load_dataset
from flap.errors import FlapError
from flap.experiment import pipeline as PL
from flap.experiment.checkpoint import load_models, save_models
from flap.experiment.config import RunConfig, load_config
from flap.experiment.metrics import final_success, write_metrics
from flap.experiment.plots import dump_latents, emit_plots

log = logging.getLogger("flap")

SUBCOMMANDS = ("gen-data", "pretrain", "plan", "finetune", "eval", "ablate-alpha", "plot")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flap", description="Offline pre-training and subgoal-guided fine-tuning.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI run configuration")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
    common.add_argument("--seed", type=int, help="overrides run.seed and data.seed")
    common.add_argument("--out-dir", type=Path, help="overrides run.out_dir")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate the scripted offline dataset")
    p.add_argument("--output", type=Path)

    p = sub.add_parser("pretrain", parents=[common], help="pre-train encoder, IQL heads and affordance models")
    p.add_argument("--dataset", type=Path)

    p = sub.add_parser("plan", parents=[common], help="plan subgoals for one target-task episode")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--episode-seed", type=int, default=0)

    p = sub.add_parser("finetune", parents=[common], help="fine-tune one or more baselines over seeds")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--dataset", type=Path)
    p.add_argument("--method", choices=[k.value for k in PL.BaselineKind], action="append")

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint without training")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--method", choices=[k.value for k in PL.BaselineKind], action="append")
    p.add_argument("--episodes", type=int)

    p = sub.add_parser("ablate-alpha", parents=[common], help="pre-train and fine-tune FLAP for each VIB weight")
    p.add_argument("--dataset", type=Path)

    p = sub.add_parser("plot", parents=[common], help="plot metrics files and dump latents")
    p.add_argument("metrics", nargs="+", type=Path)
    p.add_argument("--checkpoint", type=Path, help="also dump encoder latents of dataset observations")
    p.add_argument("--dataset", type=Path)
    p.add_argument("--n-latents", type=int, default=2000)
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides += [f"run.seed={args.seed}", f"data.seed={args.seed}"]
    if args.out_dir is not None:
        overrides.append(f"run.out_dir={args.out_dir}")
    return cfg.with_overrides(overrides) if overrides else cfg


def _need(path: Path, what: str) -> Path:
    if not Path(path).exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return Path(path)


def _dataset_path(cfg: RunConfig, given) -> Path:
    return Path(given) if given else Path(cfg.run.out_dir) / "dataset.flapds"


def pretrain_models(cfg: RunConfig, trajs, alpha: float | None = None):
    iql = cfg.iql if alpha is None else dataclasses.replace(cfg.iql, alpha_vib=alpha)
    return PL.run_pretrain(trajs, iql, cfg.affordance, cfg.pretrain, cfg.planner, cfg.finetune, cfg.run.seed)


def write_loss_curves(curves: list[dict], path: Path) -> None:
    keys = sorted({k for row in curves for k in row} - {"stage", "step"})
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stage", "step", *keys])
        for row in curves:
            w.writerow([row["stage"], row["step"], *[repr(row[k]) if k in row else "" for k in keys]])


def finetune_methods(cfg: RunConfig, models, trajs, methods, tag: str = "") -> dict[str, list[dict]]:
    """Fine-tune every method over ``run.n_seeds`` seeds; writes one metrics CSV per method."""
    out_dir = Path(cfg.run.out_dir)
    task = PL.target_task(cfg.data, cfg.task)
    results = {}
    for method in methods:
        rows = []
        for i in range(cfg.run.n_seeds):
            seed = cfg.run.seed + i
            rows += PL.run_finetune(models, trajs, task, PL.BaselineKind(method), cfg.planner, cfg.finetune, seed)
        write_metrics(rows, out_dir / f"metrics_{method}{tag}.csv")
        mean, std = final_success(rows)
        log.info("%s%s final success %.3f +- %.3f", method, tag, mean, std)
        results[method] = rows
    return results


def cmd_gen_data(cfg: RunConfig, args) -> int:
    path = args.output or _dataset_path(cfg, None)
    path.parent.mkdir(parents=True, exist_ok=True)
    generate_offline_dataset(cfg.data, path)
    print(path)
    return 0


def cmd_pretrain(cfg: RunConfig, args) -> int:
    trajs = load_dataset(_need(_dataset_path(cfg, args.dataset), "dataset"))
    models = pretrain_models(cfg, trajs)
    out = Path(cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.ini")
    save_models(models, out / "pretrain.ckpt", cfg.config_hash())
    write_loss_curves(models.loss_curves, out / "pretrain_losses.csv")
    print(out / "pretrain.ckpt")
    return 0


def cmd_plan(cfg: RunConfig, args) -> int:
    models = load_models(_need(args.checkpoint, "checkpoint"), cfg.config_hash())
    task = PL.target_task(cfg.data, cfg.task)
    obs0 = E.TabletopEnv().reset(task, args.episode_seed).astype(np.float32)
    z0 = models.agent.latent(obs0)
    zg = models.agent.latent(task.goal_observation().astype(np.float32))
    rng = np.random.default_rng([cfg.run.seed, args.episode_seed])
    plan = P.mppi_plan(z0, zg, PL.planner_config(models, cfg.planner), rng,
                       models.affordance.decode_mean, models.agent.value_of)
    text = plan.as_text()
    out = Path(cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "plan.txt").write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_finetune(cfg: RunConfig, args) -> int:
    models = load_models(_need(args.checkpoint, "checkpoint"), cfg.config_hash())
    trajs = load_dataset(_need(_dataset_path(cfg, args.dataset), "dataset"))
    finetune_methods(cfg, models, trajs, args.method or list(cfg.run.methods))
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    models = load_models(_need(args.checkpoint, "checkpoint"), cfg.config_hash())
    task = PL.target_task(cfg.data, cfg.task)
    n = cfg.run.eval_episodes if args.episodes is None else args.episodes
    for method in args.method or list(cfg.run.methods):
        rates = [PL.run_eval(models, task, PL.BaselineKind(method), cfg.planner, cfg.finetune, n,
                             seed_base=10_000 + 1000 * (cfg.run.seed + i)) for i in range(cfg.run.n_seeds)]
        rates = np.array(rates, dtype=float)
        std = rates.std(ddof=1) if len(rates) > 1 else 0.0
        print(f"{method}: {np.mean(rates):.4f} +- {std:.4f} over {len(rates)} seeds x {n} episodes")
    return 0


def cmd_ablate_alpha(cfg: RunConfig, args) -> int:
    trajs = load_dataset(_need(_dataset_path(cfg, args.dataset), "dataset"))
    for alpha in cfg.run.ablation_alphas:
        models = pretrain_models(cfg, trajs, alpha)
        finetune_methods(cfg, models, trajs, ["FLAP"], tag=f"_alpha_{alpha!r}")
    return 0


def cmd_plot(cfg: RunConfig, args) -> int:
    for p in args.metrics:
        _need(p, "metrics file")
    out = Path(cfg.run.out_dir)
    for p in emit_plots(args.metrics, out):
        print(p)
    if args.checkpoint:
        models = load_models(_need(args.checkpoint, "checkpoint"), cfg.config_hash())
        trajs = load_dataset(_need(_dataset_path(cfg, args.dataset), "dataset"))
        obs = np.concatenate([t.observations for t in trajs])
        labels = np.concatenate([np.full(len(t.observations), t.scene_id) for t in trajs])
        idx = np.random.default_rng(cfg.run.seed).choice(len(obs), min(args.n_latents, len(obs)), replace=False)
        print(dump_latents(models.agent, obs[idx], out / "latents.csv", labels[idx]))
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "plan": cmd_plan,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "ablate-alpha": cmd_ablate_alpha,
    "plot": cmd_plot,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FlapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
