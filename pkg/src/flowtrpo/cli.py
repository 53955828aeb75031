"""Command-line entry points.

Subcommands: train, ablate, analyze (klball | maxent-corr | maxent-bimodal),
eval, dump-batch. Every RunConfig key is also a flag (``env.kind`` becomes
``--env-kind``); precedence is defaults < config file < flags. Exit codes:
0 success, 1 numeric abort (partial results are already on disk), 2
configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import analysis, runner
from .config import SCHEMA, RunConfig, load_config, parse_value
from .errors import ConfigError, NumericError
from .policies import policy_from_checkpoint

log = logging.getLogger(__name__)


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key = value config file")
    for key in SCHEMA:
        flag = "--" + key.replace(".", "-").replace("_", "-")
        parser.add_argument(flag, dest=f"cfg::{key}", metavar="VALUE", default=None)


def _build_config(args) -> RunConfig:
    values = {}
    if args.config:
        values.update(load_config(args.config).to_dict())
    for key in SCHEMA:
        raw = getattr(args, f"cfg::{key}", None)
        if raw is not None:
            values[key] = parse_value(key, raw)
    return RunConfig(values)


def _parse_int_list(text: str):
    return [int(v) for v in text.split(",") if v.strip() != ""]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowtrpo",
        description="Trust-region policy optimization with pluggable action "
                    "distributions (incl. a normalizing-flow policy).",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run one seeded training experiment")
    _add_config_flags(p_train)
    p_train.add_argument("--resume", help="training checkpoint to resume from")

    p_abl = sub.add_parser("ablate", help="flow architecture grid (K x l1 x seeds)")
    _add_config_flags(p_abl)
    p_abl.add_argument("--k-values", default="2,4,6", help="comma list of K")
    p_abl.add_argument("--l1-values", default="3,5,7", help="comma list of l1")
    p_abl.add_argument("--seeds", default="0", help="comma list of seeds")

    p_an = sub.add_parser("analyze", help="reproduce the desk-scale studies")
    an_sub = p_an.add_subparsers(dest="study", required=True)

    p_kl = an_sub.add_parser("klball", help="fit a distribution onto a KL-ball boundary")
    p_kl.add_argument("--candidate", choices=("gaussian", "flow"), default="flow")
    p_kl.add_argument("--out-dir", required=True)
    p_kl.add_argument("--seed", type=int, default=0)
    p_kl.add_argument("--epsilon", type=float, default=0.01)
    p_kl.add_argument("--ref-sigma", type=float, default=0.1)
    p_kl.add_argument("--n-ref", type=int, default=10_000)
    p_kl.add_argument("--max-steps", type=int, default=10_000)

    for study in ("maxent-corr", "maxent-bimodal"):
        p_me = an_sub.add_parser(study, help=f"max-ent fit on the {study.split('-')[1]} bandit")
        _add_config_flags(p_me)

    p_eval = sub.add_parser("eval", help="roll out a checkpointed policy")
    _add_config_flags(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--episodes", type=int, default=20)
    p_eval.add_argument("--eval-seed", type=int, default=0)

    p_dump = sub.add_parser("dump-batch", help="collect one batch and dump it as CSV")
    _add_config_flags(p_dump)
    p_dump.add_argument("--out", required=True)
    p_dump.add_argument("--checkpoint", default=None)

    return parser


def _cmd_train(args) -> int:
    cfg = _build_config(args)
    report = runner.train(cfg, resume=args.resume)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def _cmd_ablate(args) -> int:
    cfg = _build_config(args)
    rows = runner.run_ablation(cfg, _parse_int_list(args.k_values),
                               _parse_int_list(args.l1_values),
                               _parse_int_list(args.seeds))
    for r in rows:
        print(f"K={r['K']} l1={r['l1']} seed={r['seed']} "
              f"mean_return={r['mean_return']:.4f} status={r['status']}")
    return 0


def _write_analysis_outputs(out_dir, samples, log_density_fn, report,
                            grid_bounds=(-8.0, 8.0), resolution=200):
    os.makedirs(out_dir, exist_ok=True)
    analysis.export_samples_csv(os.path.join(out_dir, "samples.csv"), samples)
    xs, ys, grid = analysis.density_grid(log_density_fn, grid_bounds, resolution)
    analysis.export_grid_csv(os.path.join(out_dir, "grid.csv"), xs, ys, grid)
    runner.write_json_atomic(os.path.join(out_dir, "report.json"), report.to_dict())


def _cmd_analyze(args) -> int:
    if args.study == "klball":
        spec = analysis.KlBallSpec(
            candidate=args.candidate, epsilon=args.epsilon,
            ref_sigma=args.ref_sigma, n_ref=args.n_ref, max_steps=args.max_steps,
        )
        rng = np.random.default_rng(args.seed)
        dist, report = analysis.fit_to_kl_boundary(spec, rng)
        out_dir = runner.resolve_out_dir(args.out_dir)
        samples = dist.sample(100_000, np.random.default_rng(args.seed + 1))
        _write_analysis_outputs(out_dir, samples[:10_000], dist.log_density, report)
        print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
        return 0 if report.converged else 1

    cfg = _build_config(args)
    wanted = "corr-bandit" if args.study == "maxent-corr" else "bimodal-bandit"
    if cfg["env.kind"] != wanted:
        raise ConfigError(f"{args.study} requires env.kind = {wanted}")
    if cfg["trpo.entropy_coef"] <= 0:
        raise ConfigError(f"{args.study} requires trpo.entropy_coef > 0")
    policy, report = analysis.maxent_bandit_fit(cfg)
    out_dir = runner.resolve_out_dir(cfg["out_dir"])
    rng = np.random.default_rng(cfg["seed"] + 1)
    samples, _ = policy.sample(np.zeros((10_000, policy.obs_dim)), rng)
    _write_analysis_outputs(out_dir, samples, analysis.policy_log_density(policy),
                            report, grid_bounds=(-5.0, 5.0))
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return 0


def _cmd_eval(args) -> int:
    cfg = _build_config(args)
    from .config import env_kwargs
    from .envs import make_env
    env = make_env(cfg["env.kind"], **env_kwargs(cfg))
    with open(args.checkpoint) as f:
        ckpt = json.load(f)
    if ckpt.get("format") == "flowtrpo-train-v1":
        ckpt = ckpt["policy"]
    policy = policy_from_checkpoint(ckpt)
    rng = np.random.default_rng(args.eval_seed)
    mean = runner.evaluate_policy(env, policy, args.episodes, rng)
    print(f"mean_return {mean!r} over {args.episodes} episodes")
    return 0


def _cmd_dump_batch(args) -> int:
    cfg = _build_config(args)
    runner.dump_batch_csv(cfg, args.out, checkpoint=args.checkpoint)
    print(f"wrote {args.out}")
    return 0


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("FLOWTRPO_LOGLEVEL", "WARNING"))
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "train": _cmd_train,
        "ablate": _cmd_ablate,
        "analyze": _cmd_analyze,
        "eval": _cmd_eval,
        "dump-batch": _cmd_dump_batch,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
