"""Experiment orchestration: seeded training runs, CSV logs, checkpoints.

One master seed fans out to named substreams (init, rollout, entropy-mc,
kl-mc) so toggling one consumer cannot shift the draws of another. All
output files are written atomically (temp + rename); a checkpoint stores the
policy and value vectors bit-exactly plus the full rng states, so a resumed
run produces bitwise-identical updates.
"""

from __future__ import annotations

import base64
import json
import logging
import os
import tempfile
from dataclasses import asdict, dataclass

import numpy as np

from .config import RunConfig, env_kwargs, format_config
from .envs import (Env, ValueFunction, collect, fit_value, gae_advantages,
                   make_env)
from .errors import ConfigError, NumericError
from .policies import Policy, PolicyArch, make_policy, policy_from_checkpoint
from .trpo import TrpoConfig, trpo_update

log = logging.getLogger(__name__)

STREAM_NAMES = ("init", "rollout", "entropy-mc", "kl-mc")
LOG_COLUMNS = ("iter", "timesteps", "mean_return", "surrogate_before",
               "surrogate_after", "kl_after", "step_scale", "cg_residual",
               "entropy_estimate")
ENTROPY_LOG_STATES = 64   # states used for the per-iteration entropy column
MAX_CONSECUTIVE_NUMERIC_FAILURES = 5


def write_text_atomic(path: str, text: str) -> None:
    """Write via temp file + rename; readers never see a truncated file."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json_atomic(path: str, obj) -> None:
    write_text_atomic(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def seed_streams(master_seed: int) -> dict:
    children = np.random.SeedSequence(master_seed).spawn(len(STREAM_NAMES))
    return {name: np.random.Generator(np.random.PCG64(ss))
            for name, ss in zip(STREAM_NAMES, children)}


def rng_state(gen: np.random.Generator) -> dict:
    return gen.bit_generator.state


def restore_rng(state: dict) -> np.random.Generator:
    gen = np.random.Generator(np.random.PCG64())
    gen.bit_generator.state = state
    return gen


def arch_from_config(cfg: RunConfig) -> PolicyArch:
    return PolicyArch(
        hidden=tuple(cfg["policy.hidden"]),
        gmm_k=cfg["policy.gmm_k"],
        flow_layers=cfg["policy.flow_layers"],
        flow_hidden=cfg["policy.flow_hidden"],
        state_hidden=tuple(cfg["policy.state_hidden"]),
        scale_clamp=cfg["policy.scale_clamp"],
        inject_after=cfg["policy.inject_after"],
    )


def trpo_from_config(cfg: RunConfig) -> TrpoConfig:
    return TrpoConfig(
        epsilon=cfg["trpo.epsilon"],
        cg_iters=cfg["trpo.cg_iters"],
        cg_damping=cfg["trpo.cg_damping"],
        hvp_fd_step=cfg["trpo.hvp_fd_step"],
        backtrack_ratio=cfg["trpo.backtrack_ratio"],
        max_backtracks=cfg["trpo.max_backtracks"],
        entropy_coef=cfg["trpo.entropy_coef"],
        entropy_samples=cfg["trpo.entropy_samples"],
        fvp_subsample=cfg["trpo.fvp_subsample"],
    )


def build_run(cfg: RunConfig):
    """(env, policy, value function, trpo config, rng streams) from config."""
    env = make_env(cfg["env.kind"], **env_kwargs(cfg))
    streams = seed_streams(cfg["seed"])
    policy = make_policy(
        cfg["policy.kind"], env.obs_dim, env.act_dim, arch_from_config(cfg),
        rng=streams["init"], action_low=env.action_low, action_high=env.action_high,
    )
    vf = ValueFunction(env.obs_dim, rng=streams["init"])
    return env, policy, vf, trpo_from_config(cfg), streams


@dataclass
class IterationRow:
    iter: int
    timesteps: int
    mean_return: float
    surrogate_before: float
    surrogate_after: float
    kl_after: float
    step_scale: float
    cg_residual: float
    entropy_estimate: float

    def csv(self) -> str:
        vals = [self.iter, self.timesteps] + [
            repr(float(v)) for v in (
                self.mean_return, self.surrogate_before, self.surrogate_after,
                self.kl_after, self.step_scale, self.cg_residual,
                self.entropy_estimate)
        ]
        return ",".join(str(v) for v in vals)


def run_iteration(env, policy, vf, trpo_cfg, cfg, streams, iteration, timesteps):
    """One collect/update/fit cycle; returns (row, batch, report)."""
    batch = collect(env, policy, cfg["train.batch_size"], streams["rollout"],
                    n_envs=cfg["train.rollout_envs"])
    gae_advantages(batch, vf, cfg["train.gamma"], cfg["train.lam"],
                   normalize=cfg["train.normalize_advantages"])
    report = trpo_update(policy, batch, trpo_cfg, entropy_rng=streams["entropy-mc"])
    fit_value(vf, batch, epochs=cfg["train.vf_epochs"],
              step_size=cfg["train.vf_step_size"])
    ent_states = batch.states[:ENTROPY_LOG_STATES]
    entropy = policy.entropy_mc(ent_states, trpo_cfg.entropy_samples,
                                streams["entropy-mc"])
    row = IterationRow(
        iter=iteration, timesteps=timesteps + len(batch),
        mean_return=batch.mean_return(),
        surrogate_before=report.surrogate_before,
        surrogate_after=report.surrogate_after,
        kl_after=report.kl_after, step_scale=report.step_scale,
        cg_residual=report.cg_residual, entropy_estimate=entropy,
    )
    return row, batch, report


def training_loop(cfg: RunConfig, env, policy, vf, trpo_cfg, streams,
                  start_iteration=0, start_timesteps=0, on_iteration=None):
    """Run until the timestep budget is spent; yields IterationRows.

    A numeric failure aborts its iteration (parameters untouched) and the
    loop continues; persistent failures abort the run.
    """
    rows = []
    iteration = start_iteration
    timesteps = start_timesteps
    consecutive_failures = 0
    while timesteps < cfg["train.total_timesteps"]:
        iteration += 1
        try:
            row, batch, report = run_iteration(
                env, policy, vf, trpo_cfg, cfg, streams, iteration, timesteps)
            consecutive_failures = 0
        except NumericError as e:
            consecutive_failures += 1
            log.warning("iteration %d aborted on numeric error: %s", iteration, e)
            if consecutive_failures > MAX_CONSECUTIVE_NUMERIC_FAILURES:
                raise NumericError(
                    f"{consecutive_failures} consecutive numeric failures; giving up"
                ) from e
            continue
        timesteps = row.timesteps
        rows.append(row)
        if on_iteration is not None:
            on_iteration(row)
    return rows


# -- persistence ---------------------------------------------------------------

def _vector_b64(vec: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(vec, dtype="<f8").tobytes()).decode()


def _vector_from_b64(s: str) -> np.ndarray:
    return np.frombuffer(base64.b64decode(s), dtype="<f8").copy()


def train_checkpoint(policy, vf, streams, iteration, timesteps, seed) -> dict:
    return {
        "format": "flowtrpo-train-v1",
        "iteration": iteration,
        "timesteps": timesteps,
        "policy": policy.to_checkpoint(seed=seed),
        "vf_b64": _vector_b64(vf.params.vector),
        "rng": {name: rng_state(streams[name]) for name in STREAM_NAMES},
    }


def load_train_checkpoint(path: str):
    with open(path) as f:
        ckpt = json.load(f)
    if ckpt.get("format") != "flowtrpo-train-v1":
        raise ConfigError(f"{path} is not a flowtrpo training checkpoint")
    return ckpt


def restore_run(cfg: RunConfig, ckpt: dict):
    """Rebuild (env, policy, vf, trpo_cfg, streams, iteration, timesteps)."""
    env = make_env(cfg["env.kind"], **env_kwargs(cfg))
    policy = policy_from_checkpoint(ckpt["policy"])
    vf = ValueFunction(env.obs_dim, rng=np.random.default_rng(0))
    vf.params = vf.params.replace(_vector_from_b64(ckpt["vf_b64"]))
    streams = {name: restore_rng(ckpt["rng"][name]) for name in STREAM_NAMES}
    return env, policy, vf, trpo_from_config(cfg), streams, ckpt["iteration"], ckpt["timesteps"]


# -- the train entry point -----------------------------------------------------

def resolve_out_dir(out_dir: str) -> str:
    root = os.environ.get("FLOWTRPO_OUTPUT_ROOT")
    if root and not os.path.isabs(out_dir):
        return os.path.join(root, out_dir)
    return out_dir


def train(cfg: RunConfig, resume: str | None = None) -> dict:
    """Full training run with logging and checkpoints; returns the report."""
    out_dir = resolve_out_dir(cfg["out_dir"])
    os.makedirs(out_dir, exist_ok=True)
    log_path = os.path.join(out_dir, "log.csv")
    ckpt_path = os.path.join(out_dir, "checkpoint.json")
    report_path = os.path.join(out_dir, "report.json")
    write_text_atomic(os.path.join(out_dir, "config.txt"), format_config(cfg))

    if resume is not None:
        ckpt = load_train_checkpoint(resume)
        env, policy, vf, trpo_cfg, streams, it0, ts0 = restore_run(cfg, ckpt)
        rows_text = []
        if os.path.exists(log_path):
            with open(log_path) as f:
                existing = f.read().splitlines()
            rows_text = existing[1:]  # keep rows from the interrupted run
    else:
        env, policy, vf, trpo_cfg, streams = build_run(cfg)
        it0, ts0 = 0, 0
        rows_text = []

    header = ",".join(LOG_COLUMNS)

    def flush_log():
        write_text_atomic(log_path, "\n".join([header] + rows_text) + "\n")

    flush_log()
    every = max(1, cfg["train.checkpoint_every"])

    def on_iteration(row: IterationRow):
        rows_text.append(row.csv())
        flush_log()
        if row.iter % every == 0:
            write_json_atomic(ckpt_path, train_checkpoint(
                policy, vf, streams, row.iter, row.timesteps, cfg["seed"]))

    try:
        rows = training_loop(cfg, env, policy, vf, trpo_cfg, streams,
                             start_iteration=it0, start_timesteps=ts0,
                             on_iteration=on_iteration)
    finally:
        # flush a final checkpoint even on abort so partial state survives
        last_ts = int(rows_text[-1].split(",")[1]) if rows_text else ts0
        last_it = int(rows_text[-1].split(",")[0]) if rows_text else it0
        write_json_atomic(ckpt_path, train_checkpoint(
            policy, vf, streams, last_it, last_ts, cfg["seed"]))

    returns = [r.mean_return for r in rows[-10:]]
    report = {
        "iterations": it0 + len(rows),
        "timesteps": rows[-1].timesteps if rows else ts0,
        "mean_return_last10": float(np.mean(returns)) if returns else float("nan"),
        "std_return_last10": float(np.std(returns)) if returns else float("nan"),
        "config": cfg.to_dict(),
    }
    write_json_atomic(report_path, report)
    return report


def evaluate_policy(env: Env, policy: Policy, episodes: int, rng) -> float:
    """Mean undiscounted return of the stochastic policy."""
    totals = []
    for _ in range(episodes):
        state = env.reset(rng)
        total, t, done = 0.0, 0, False
        while not done:
            action, _ = policy.sample(state[None, :], rng)
            state, r, done = env.step(state, action[0], rng, t=t)
            total += r
            t += 1
        totals.append(total)
    return float(np.mean(totals))


def run_ablation(cfg: RunConfig, k_values, l1_values, seeds) -> list:
    """One training run per (K, l1, seed) cell; per-cell failures are
    recorded and the grid continues. Returns summary rows."""
    out_dir = resolve_out_dir(cfg["out_dir"])
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for k in k_values:
        for l1 in l1_values:
            for seed in seeds:
                cell = cfg.updated({
                    "policy.flow_layers": int(k),
                    "policy.flow_hidden": int(l1),
                    "seed": int(seed),
                    "out_dir": os.path.join(cfg["out_dir"],
                                            f"cell_K{k}_l{l1}_seed{seed}"),
                })
                try:
                    report = train(cell)
                    rows.append({
                        "K": int(k), "l1": int(l1), "seed": int(seed),
                        "mean_return": report["mean_return_last10"],
                        "std_return": report["std_return_last10"],
                        "status": "ok",
                    })
                except Exception as e:  # cell failures must not kill the grid
                    log.warning("ablation cell K=%s l1=%s seed=%s failed: %s",
                                k, l1, seed, e)
                    rows.append({
                        "K": int(k), "l1": int(l1), "seed": int(seed),
                        "mean_return": float("nan"), "std_return": float("nan"),
                        "status": f"error: {e}",
                    })
    header = "K,l1,seed,mean_return,std_return,status"
    lines = [header] + [
        f"{r['K']},{r['l1']},{r['seed']},{r['mean_return']!r},{r['std_return']!r},"
        f"\"{r['status']}\"" for r in rows
    ]
    write_text_atomic(os.path.join(out_dir, "ablation.csv"), "\n".join(lines) + "\n")
    return rows


def dump_batch_csv(cfg: RunConfig, path: str, checkpoint: str | None = None) -> None:
    """Collect one batch and dump it as CSV (episode, t, s..., a..., r, logp,
    V, A, return)."""
    if checkpoint is not None:
        ckpt = load_train_checkpoint(checkpoint)
        env, policy, vf, trpo_cfg, streams, _, _ = restore_run(cfg, ckpt)
    else:
        env, policy, vf, trpo_cfg, streams = build_run(cfg)
    batch = collect(env, policy, cfg["train.batch_size"], streams["rollout"],
                    n_envs=cfg["train.rollout_envs"])
    gae_advantages(batch, vf, cfg["train.gamma"], cfg["train.lam"],
                   normalize=cfg["train.normalize_advantages"])
    s_cols = [f"s{i}" for i in range(env.obs_dim)]
    a_cols = [f"a{i}" for i in range(env.act_dim)]
    header = ",".join(["episode", "t"] + s_cols + a_cols
                      + ["r", "logp", "V", "A", "return"])
    lines = [header]
    for i in range(len(batch)):
        vals = ([str(batch.episode[i]), str(batch.t_index[i])]
                + [repr(float(v)) for v in batch.states[i]]
                + [repr(float(v)) for v in batch.actions[i]]
                + [repr(float(batch.rewards[i])), repr(float(batch.logps[i])),
                   repr(float(batch.values[i])), repr(float(batch.advantages[i])),
                   repr(float(batch.returns[i]))])
        lines.append(",".join(vals))
    write_text_atomic(path, "\n".join(lines) + "\n")
