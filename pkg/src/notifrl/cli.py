"""Command-line entry point: ``notifrl <command> [flags]``.

Exit codes: 0 success, 1 usage or config error, 2 data or schema error,
3 numerical failure. Commands write outputs only after all work succeeded.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .config import PipelineConfig, digest, load_config
from .dataset import FEATURE_SCHEMA
from .errors import ConfigError, DataError, NotifRLError
from .io import (
    atomic_write,
    dumps_checkpoint,
    dumps_dataset,
    dumps_loss,
    dumps_models,
    dumps_records,
    manifest,
    manifest_path,
    read_checkpoint,
    read_dataset,
    read_models,
)
from .pipeline import SWEEP_COLUMNS, RewardModels, evaluate, fit_reward_models, ground_truth, run_sweep, train_policy
from .sim import generate_dataset
from .trainer import Smoothing

log = logging.getLogger("notifrl")

OPE_COLUMNS = [
    "metric", "estimator", "value", "stderr", "ess", "n_units", "n_episodes",
    "max_weight", "mean_weight", "weight_variance", "top1pct_mass",
]
SIM_COLUMNS = ["metric", "mean", "stderr", "ci_low", "ci_high", "n_episodes"]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _write_outputs(outputs: dict, stage: str, cfg: PipelineConfig, seed, inputs: dict) -> None:
    # everything is rendered before the first write
    for path, text in outputs.items():
        atomic_write(path, text)
    main_out = next(iter(outputs))
    meta = manifest(stage, digest(cfg), seed, {k: str(v) for k, v in inputs.items() if v},
                    {Path(p).name: str(p) for p in outputs})
    atomic_write(manifest_path(main_out), json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _require(path, what: str) -> Path:
    if path is None:
        raise ConfigError(f"--{what} is required")
    p = Path(path)
    if not p.is_file():
        raise DataError(f"{what} file not found: {p}")
    return p


def _models(args, dataset, cfg: PipelineConfig) -> Optional[RewardModels]:
    if args.models:
        click, session = read_models(_require(args.models, "models"))
        return RewardModels(click, session)
    if cfg.reward.use_predicted_clicks or cfg.reward.use_predicted_sessions:
        return fit_reward_models(dataset, cfg.reward)
    return None


def cmd_gen_data(args, cfg: PipelineConfig) -> None:
    if args.seed is not None:
        cfg = cfg.model_copy(update={"sim": cfg.sim.model_copy(update={"rng_seed": args.seed})})
    ds = generate_dataset(cfg.sim)
    _write_outputs({args.out: dumps_dataset(ds)}, "gen-data", cfg, cfg.sim.rng_seed, {"config": args.config})


def cmd_fit_reward_models(args, cfg: PipelineConfig) -> None:
    ds = read_dataset(_require(args.dataset, "dataset"))
    models = fit_reward_models(ds, cfg.reward)
    text = dumps_models(models.click, models.session, ds.schema, digest(cfg.reward))
    _write_outputs({args.out: text}, "fit-reward-models", cfg, cfg.reward.seed,
                   {"config": args.config, "dataset": args.dataset})


def cmd_train(args, cfg: PipelineConfig) -> None:
    if args.seed is not None:
        cfg = cfg.model_copy(update={"train": cfg.train.model_copy(update={"seed": args.seed})})
    ds = read_dataset(_require(args.dataset, "dataset"))
    models = _models(args, ds, cfg)
    policy, report, spec = train_policy(ds, cfg.reward, cfg.train, models)
    out = Path(args.out)
    loss_path = out.with_name(out.stem + ".loss.csv")
    _write_outputs({out: dumps_checkpoint(policy, spec, cfg), loss_path: dumps_loss(report)},
                   "train", cfg, cfg.train.seed,
                   {"config": args.config, "dataset": args.dataset, "models": args.models})


def evaluation_records(ev) -> List[dict]:
    rows = []
    for name in ("volume", "sessions", "clicks", "scalarized"):
        est = ev[name]
        d = est.diagnostics
        rows.append({
            "metric": name, "estimator": est.estimator_kind, "value": est.value, "stderr": est.stderr,
            "ess": est.effective_sample_size, "n_units": est.n_units, "n_episodes": est.n_episodes,
            "max_weight": d.max_weight, "mean_weight": d.mean_weight,
            "weight_variance": d.weight_variance, "top1pct_mass": d.top1pct_mass,
        })
    ctr = ev.ctr_proxy
    rows.append({"metric": "ctr_proxy", "estimator": ev["clicks"].estimator_kind,
                 "value": "" if ctr is None else ctr})
    return rows


def cmd_evaluate(args, cfg: PipelineConfig) -> None:
    policy = read_checkpoint(_require(args.checkpoint, "checkpoint"))
    ds = read_dataset(_require(args.dataset, "dataset"))
    ev = evaluate(ds, policy, Smoothing.from_config(cfg.ope), cfg.reward.prefs.to_prefs(),
                  cfg.ope.gamma, cfg.ope.metric_gamma, cfg.ope.self_normalized)
    _write_outputs({args.out: dumps_records(OPE_COLUMNS, evaluation_records(ev), args.format)},
                   "evaluate", cfg, None,
                   {"config": args.config, "dataset": args.dataset, "checkpoint": args.checkpoint})


def cmd_sweep(args, cfg: PipelineConfig) -> None:
    if args.seed is not None:
        cfg = cfg.model_copy(update={"sweep": cfg.sweep.model_copy(update={"base_seed": args.seed})})
    ds = read_dataset(_require(args.dataset, "dataset"))
    models = _models(args, ds, cfg)
    rows = run_sweep(ds, cfg, models, workers=args.workers)
    _write_outputs({args.out: dumps_records(SWEEP_COLUMNS, rows, args.format)}, "sweep", cfg,
                   cfg.sweep.base_seed, {"config": args.config, "dataset": args.dataset, "models": args.models})


def cmd_eval_sim(args, cfg: PipelineConfig) -> None:
    seed = cfg.ope.eval_seed if args.seed is None else args.seed
    n_episodes = cfg.ope.n_episodes if args.n_episodes is None else args.n_episodes
    if n_episodes < 1:
        raise ConfigError("--n-episodes must be >= 1")
    policy = read_checkpoint(_require(args.checkpoint, "checkpoint"))
    if policy.schema and len(policy.schema) != policy.params.layer_dims[0]:
        raise DataError("checkpoint schema width does not match its input layer")
    if policy.schema and tuple(policy.schema) != FEATURE_SCHEMA:
        raise DataError("checkpoint feature schema does not match the simulator features")
    gt = ground_truth(policy, cfg.sim, Smoothing.from_config(cfg.ope), n_episodes, cfg.ope.gamma,
                      cfg.reward.prefs.to_prefs(), seed)
    rows = []
    entries = [("scalarized_return", gt.mean_return, gt.stderr)]
    entries += [(k, gt.metrics[k], gt.metric_stderr.get(k)) for k in ("sessions", "wau", "volume", "clicks", "visits")]
    for name, mean, se in entries:
        rows.append({"metric": name, "mean": mean, "stderr": se, "ci_low": mean - 1.96 * se,
                     "ci_high": mean + 1.96 * se, "n_episodes": n_episodes})
    ctr = gt.metrics.get("ctr")
    rows.append({"metric": "ctr", "mean": "" if ctr is None else ctr, "n_episodes": n_episodes})
    _write_outputs({args.out: dumps_records(SIM_COLUMNS, rows, args.format)}, "eval-sim", cfg, seed,
                   {"config": args.config, "checkpoint": args.checkpoint})


COMMANDS = {
    "gen-data": (cmd_gen_data, "simulate users and write a logged dataset"),
    "fit-reward-models": (cmd_fit_reward_models, "fit click and session reward models"),
    "train": (cmd_train, "train a conservative double-DQN policy"),
    "evaluate": (cmd_evaluate, "off-policy evaluation of a checkpoint on a dataset"),
    "sweep": (cmd_sweep, "train and evaluate a hyperparameter grid"),
    "eval-sim": (cmd_eval_sim, "Monte-Carlo evaluation of a checkpoint in the simulator"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="notifrl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="pipeline config JSON (defaults apply when omitted)")
        p.add_argument("--out", required=True, help="output path")
        p.add_argument("--seed", type=int, help="override the seed this command uses")
        if name not in ("gen-data", "eval-sim"):
            p.add_argument("--dataset", required=True)
        if name in ("train", "sweep"):
            p.add_argument("--models", help="reward model file from fit-reward-models")
        if name in ("evaluate", "eval-sim"):
            p.add_argument("--checkpoint", required=True)
        if name in ("evaluate", "sweep", "eval-sim"):
            p.add_argument("--format", choices=("csv", "json"), default="csv")
        if name == "sweep":
            p.add_argument("--workers", type=int, default=1)
        if name == "eval-sim":
            p.add_argument("--n-episodes", type=int)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        COMMANDS[args.command][0](args, cfg)
    except NotifRLError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
