"""Command-line entry point.

Subcommands cover the full pipeline: synthetic data generation, encoder
pre-training, episodic meta-training, evaluation with records/ROC/metric
outputs, re-rendering reports from stored records, and the gradient
verification suite. Errors come back as a single machine-parseable line
on stderr with a nonzero exit code. The only environment variable
consulted is FLOWR_OUT_DIR (default output directory for eval outputs).
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from . import meta, runner
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import (
    ExperimentConfig,
    config_from_json,
    config_hash,
    config_with_overrides,
    preset,
    preset_names,
)
from .crp import CrpParams
from .data import generate_synthetic_world, read_dataset, subset_classes, write_dataset
from .encoder import Encoder, pretrain
from .gaussian import NoiseModel
from .metrics import accuracy_suite, scores_from_records, threshold_at_tpr


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def _add_config_flags(p, *, setting=True):
    p.add_argument("--preset", choices=preset_names(), help="named configuration preset")
    p.add_argument("--config", help="JSON configuration file")
    if setting:
        p.add_argument("--setting", choices=["sc", "lc"])
    p.add_argument("--a", type=float)
    p.add_argument("--noise-variance", type=float)
    p.add_argument("--seed", type=int)


def build_parser() -> _Parser:
    p = _Parser(prog="flowr", description="few-shot open-world recognition toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synthetic", help="write a synthetic embedding dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--classes", type=int, default=30)
    g.add_argument("--dim", type=int, default=8)
    g.add_argument("--prior-variance", type=float, default=25.0)
    g.add_argument("--noise-variance", type=float, default=0.5)
    g.add_argument("--points-per-class", type=int, default=40)
    g.add_argument("--seed", type=int, default=0)

    pre = sub.add_parser("pretrain", help="train encoder and class embeddings")
    pre.add_argument("--data", required=True)
    pre.add_argument("--out", required=True, help="checkpoint path to write")
    pre.add_argument("--out-dim", type=int, help="embedding dimension (default: data dim)")
    pre.add_argument("--beta", type=float)
    pre.add_argument("--step-size", type=float)
    pre.add_argument("--epochs", type=int)
    pre.add_argument("--batch-size", type=int)
    pre.add_argument("--train-classes", type=int, default=0,
                     help="restrict training to the first K class ids (0 = all)")
    _add_config_flags(pre)

    mt = sub.add_parser("metatrain", help="episodic meta-training")
    mt.add_argument("--data", required=True)
    mt.add_argument("--out", required=True, help="checkpoint path to write")
    mt.add_argument("--init", help="checkpoint to initialize from (required for lc)")
    mt.add_argument("--episodes", type=int)
    mt.add_argument("--batch-size", type=int)
    mt.add_argument("--step-size", type=float)
    mt.add_argument("--lambda-w", type=float)
    mt.add_argument("--support-classes", type=int)
    mt.add_argument("--novel-classes", type=int)
    mt.add_argument("--shots-min", type=int)
    mt.add_argument("--shots-max", type=int)
    mt.add_argument("--queries-per-class", type=int)
    mt.add_argument("--train-classes", type=int, default=0,
                    help="restrict training to the first K class ids (0 = all)")
    mt.add_argument("--encoder", choices=["identity", "affine"], default="identity",
                    help="encoder when no --init is given")
    mt.add_argument("--sequential", action="store_true",
                    help="teacher-forced sequential query loss instead of the frozen state")
    mt.add_argument("--trace", help="write per-step loss trace to this file")
    _add_config_flags(mt)

    ev = sub.add_parser("eval", help="run evaluation episodes and write reports")
    ev.add_argument("--data", required=True)
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--tpr", type=float, help="operating true-positive rate")
    ev.add_argument("--episodes", type=int)
    ev.add_argument("--workers", type=int, default=1)
    ev.add_argument("--method", choices=["flowr", "ncm", "protonet"], default="flowr")
    ev.add_argument("--out-dir", help="output directory (FLOWR_OUT_DIR overrides the default)")
    ev.add_argument("--train-classes", type=int, default=0,
                    help="leading class ids reserved for training; sc eval samples the rest")
    ev.add_argument("--support-classes", type=int)
    ev.add_argument("--novel-classes", type=int)
    ev.add_argument("--queries-per-class", type=int)
    ev.add_argument("--fine-tune-steps", type=int)
    ev.add_argument("--fine-tune-step-size", type=float)
    ev.add_argument("--lc-init-count", type=int,
                    help="pseudo-count seeded into each known-known class (default 0)")
    _add_config_flags(ev)

    rp = sub.add_parser("report", help="re-render the metric table from stored records")
    rp.add_argument("--records", required=True)
    rp.add_argument("--tpr", type=float, default=0.15)

    gc = sub.add_parser("grad-check", help="finite-difference gradient verification")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--trials", type=int, default=10)
    gc.add_argument("--tolerance", type=float, default=1e-4)
    return p


def _build_config(args, *, default_setting=None) -> ExperimentConfig:
    if getattr(args, "preset", None):
        cfg = preset(args.preset)
    elif getattr(args, "config", None):
        with open(args.config) as fh:
            cfg = config_from_json(fh.read())
    else:
        cfg = ExperimentConfig(setting=default_setting or "sc")
    overrides = {
        "setting": getattr(args, "setting", None),
        "a": getattr(args, "a", None),
        "noise_variance": getattr(args, "noise_variance", None),
        "seed": getattr(args, "seed", None),
        "beta": getattr(args, "beta", None),
        "pretrain_step_size": getattr(args, "step_size", None) if args.command == "pretrain" else None,
        "pretrain_epochs": getattr(args, "epochs", None),
        "pretrain_batch_size": getattr(args, "batch_size", None) if args.command == "pretrain" else None,
        "meta_step_size": getattr(args, "step_size", None) if args.command == "metatrain" else None,
        "meta_episodes": getattr(args, "episodes", None) if args.command == "metatrain" else None,
        "meta_batch_size": getattr(args, "batch_size", None) if args.command == "metatrain" else None,
        "lambda_w": getattr(args, "lambda_w", None),
        "train_support_classes": getattr(args, "support_classes", None) if args.command == "metatrain" else None,
        "train_novel_classes": getattr(args, "novel_classes", None) if args.command == "metatrain" else None,
        "shots_min": getattr(args, "shots_min", None),
        "shots_max": getattr(args, "shots_max", None),
        "train_queries_per_class": getattr(args, "queries_per_class", None) if args.command == "metatrain" else None,
        "eval_support_classes": getattr(args, "support_classes", None) if args.command == "eval" else None,
        "eval_novel_classes": getattr(args, "novel_classes", None) if args.command == "eval" else None,
        "eval_queries_per_class": getattr(args, "queries_per_class", None) if args.command == "eval" else None,
        "eval_episodes": getattr(args, "episodes", None) if args.command == "eval" else None,
        "operating_tpr": getattr(args, "tpr", None),
        "fine_tune_steps": getattr(args, "fine_tune_steps", None),
        "fine_tune_step_size": getattr(args, "fine_tune_step_size", None),
        "lc_eval_init_count": getattr(args, "lc_init_count", None),
    }
    return config_with_overrides(cfg, **overrides)


def _train_split(ds, train_classes):
    if train_classes <= 0:
        return ds
    if train_classes > ds.n_classes:
        raise CliError(f"--train-classes {train_classes} exceeds {ds.n_classes} dataset classes")
    return subset_classes(ds, range(1, train_classes + 1))


def _cmd_gen_synthetic(args):
    ds = generate_synthetic_world(
        args.classes, args.dim, args.prior_variance, args.noise_variance,
        args.points_per_class, args.seed,
    )
    write_dataset(args.out, ds)
    print(f"wrote {args.out}: {len(ds)} points, {ds.n_classes} classes, dim {ds.dim}")
    return 0


def _cmd_pretrain(args):
    cfg = _build_config(args)
    ds = _train_split(read_dataset(args.data), args.train_classes)
    result = pretrain(
        ds,
        out_dim=args.out_dim,
        beta=cfg.beta,
        step_size=cfg.pretrain_step_size,
        epochs=cfg.pretrain_epochs,
        batch_size=cfg.pretrain_batch_size,
        rng_seed=cfg.seed,
    )
    d = result.embeddings.dim
    params = meta.init_meta_params(d, np.random.default_rng(cfg.seed), encoder=result.encoder, a=cfg.a)
    ckpt = Checkpoint(
        params=params,
        crp=CrpParams(a=cfg.a, rho=params.rho),
        noise=NoiseModel(noise_variance=cfg.noise_variance),
        setting=cfg.setting,
        embeddings=result.embeddings,
        config_hash=config_hash(cfg),
    )
    save_checkpoint(args.out, ckpt)
    print(
        f"wrote {args.out}: {result.embeddings.n_classes} class embeddings, dim {d}, "
        f"final loss {result.loss_trace[-1]:.6f}"
    )
    return 0


def _lc_stats_from_embeddings(params, embeddings):
    lam = 1.0 / embeddings.variances
    return replace(
        params, class_q=embeddings.means * lam[:, None], class_log_lambda=np.log(lam)
    )


def _cmd_metatrain(args):
    cfg = _build_config(args)
    ds = _train_split(read_dataset(args.data), args.train_classes)
    rng = np.random.default_rng(cfg.seed)
    embeddings = None
    if args.init:
        init_ckpt = load_checkpoint(args.init)
        params = init_ckpt.params
        embeddings = init_ckpt.embeddings
        if cfg.setting == "lc" and params.class_q is None:
            if embeddings is None:
                raise CliError("large-context training needs class embeddings in --init")
            params = _lc_stats_from_embeddings(params, embeddings)
    else:
        if cfg.setting == "lc":
            raise CliError("large-context training requires --init with a pretrained checkpoint")
        encoder = (
            Encoder.identity_affine(ds.dim) if args.encoder == "affine" else Encoder.identity()
        )
        params = meta.init_meta_params(ds.dim, rng, encoder=encoder, a=cfg.a)

    known = np.arange(1, params.class_q.shape[0] + 1) if cfg.setting == "lc" else None
    params, trace = meta.run_meta_training(
        ds,
        cfg=cfg.train_episode_config(),
        setting=cfg.setting,
        n_episodes=cfg.meta_episodes,
        batch_size=cfg.meta_batch_size,
        step_size=cfg.meta_step_size,
        lambda_w=cfg.lambda_w,
        seed=cfg.seed,
        init=params,
        known_classes=known,
        a=cfg.a,
        noise_variance=cfg.noise_variance,
        sequential=args.sequential,
    )
    ckpt = Checkpoint(
        params=params,
        crp=CrpParams(a=cfg.a, rho=params.rho),
        noise=NoiseModel(noise_variance=cfg.noise_variance),
        setting=cfg.setting,
        embeddings=embeddings,
        config_hash=config_hash(cfg),
    )
    save_checkpoint(args.out, ckpt)
    if args.trace:
        with open(args.trace, "w") as fh:
            for row in trace:
                fh.write(
                    f"step={row['step']} episodes={row['episodes']} "
                    f"loss={row['loss']!r} nll={row['nll']!r} adapt={row['adapt']!r}\n"
                )
    print(
        f"wrote {args.out}: {cfg.setting} meta-training over {cfg.meta_episodes} episodes, "
        f"final loss {trace[-1]['loss']:.6f}"
    )
    return 0


def _cmd_eval(args):
    ckpt = load_checkpoint(args.checkpoint)
    cfg = _build_config(args, default_setting=ckpt.setting)
    ds = read_dataset(args.data)
    if cfg.setting == "sc" and args.train_classes > 0:
        if args.train_classes >= ds.n_classes:
            raise CliError(f"--train-classes {args.train_classes} leaves no evaluation classes")
        ds = subset_classes(ds, range(args.train_classes + 1, ds.n_classes + 1))
    result = runner.evaluate(
        ds, ckpt, cfg, workers=args.workers, method=args.method
    )
    out_dir = runner.output_dir(args.out_dir)
    os.makedirs(out_dir, exist_ok=True)
    runner.write_records(os.path.join(out_dir, f"{args.method}_records.txt"), result.episodes)
    runner.write_roc_csv(os.path.join(out_dir, f"{args.method}_roc.csv"), result.roc)
    runner.write_metrics(os.path.join(out_dir, f"{args.method}_metrics.txt"), result.metrics)
    sys.stdout.write(runner.format_metrics(result.metrics))
    return 0


def _cmd_report(args):
    episodes = runner.read_records(args.records)
    scores = scores_from_records(episodes)
    tau, achieved = threshold_at_tpr(scores, args.tpr)
    metrics = accuracy_suite(episodes, tau)
    metrics.update({"tau": tau, "achieved_tpr": achieved, "target_tpr": args.tpr})
    sys.stdout.write(runner.format_metrics(metrics))
    return 0


def _cmd_grad_check(args):
    results = runner.run_grad_check_suite(seed=args.seed, trials=args.trials)
    for name in sorted(results):
        print(f"check name={name} max_rel_error={results[name]!r}")
    worst = max(results.values())
    if worst > args.tolerance:
        print(f"error: gradient check failed: {worst!r} > {args.tolerance!r}", file=sys.stderr)
        return 1
    return 0


_COMMANDS = {
    "gen-synthetic": _cmd_gen_synthetic,
    "pretrain": _cmd_pretrain,
    "metatrain": _cmd_metatrain,
    "eval": _cmd_eval,
    "report": _cmd_report,
    "grad-check": _cmd_grad_check,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return _COMMANDS[args.command](args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # single-line, machine-parseable failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
