"""Run configuration: a flat, namespaced key-value file with strict parsing.

The format is one ``key = value`` assignment per line, ``#`` comments, and a
fixed schema: unknown keys are rejected with the offending line number, and
every value must parse as its declared type. ``format_config`` writes a
canonical file that parses back to the identical configuration.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .errors import ConfigError

_REQUIRED = object()


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "yes", "1"):
        return True
    if t in ("false", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_floats(text: str):
    return tuple(float(v) for v in text.split(",") if v.strip() != "")


def _parse_ints(text: str):
    return tuple(int(v) for v in text.split(",") if v.strip() != "")


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# key -> (parser, default); _REQUIRED means the key must be present
SCHEMA = {
    "env.kind": (str, _REQUIRED),
    "env.sigma": (_parse_floats, (1.0, 0.8, 0.8, 1.0)),       # row-major covariance
    "env.mode_centers": (_parse_floats, (-0.7, 0.0, 0.7, 0.0)),
    "env.mode_scale": (float, 0.05),
    "env.box_halfwidth": (float, 5.0),
    "policy.kind": (str, _REQUIRED),
    "policy.hidden": (_parse_ints, (64, 64)),
    "policy.gmm_k": (int, 2),
    "policy.flow_layers": (int, 4),
    "policy.flow_hidden": (int, 3),
    "policy.state_hidden": (_parse_ints, (64, 64)),
    "policy.scale_clamp": (float, 5.0),
    "policy.inject_after": (int, 1),
    "trpo.epsilon": (float, 0.01),
    "trpo.cg_iters": (int, 10),
    "trpo.cg_damping": (float, 0.1),
    "trpo.hvp_fd_step": (float, 1e-5),
    "trpo.backtrack_ratio": (float, 0.5),
    "trpo.max_backtracks": (int, 10),
    "trpo.entropy_coef": (float, 0.0),
    "trpo.entropy_samples": (int, 64),
    "trpo.fvp_subsample": (int, 256),
    "train.total_timesteps": (int, 128000),
    "train.batch_size": (int, 512),
    "train.gamma": (float, 0.99),
    "train.lam": (float, 0.97),
    "train.normalize_advantages": (_parse_bool, True),
    "train.vf_epochs": (int, 5),
    "train.vf_step_size": (float, 1e-3),
    "train.rollout_envs": (int, 8),
    "train.checkpoint_every": (int, 50),
    "seed": (int, 0),
    "out_dir": (str, "run"),
}


@dataclass
class RunConfig:
    """All knobs of one experiment, keyed exactly like the config file."""

    values: dict = field(default_factory=dict)

    def __post_init__(self):
        merged = {}
        for key, (_, default) in SCHEMA.items():
            if key in self.values:
                merged[key] = self.values[key]
            elif default is not _REQUIRED:
                merged[key] = default
        missing = [k for k, (_, d) in SCHEMA.items()
                   if d is _REQUIRED and k not in merged]
        if missing:
            raise ConfigError(f"missing required config key(s): {', '.join(missing)}")
        unknown = sorted(set(self.values) - set(SCHEMA))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        self.values = merged

    def __getitem__(self, key: str):
        return self.values[key]

    def updated(self, overrides: dict) -> "RunConfig":
        vals = dict(self.values)
        for key, value in overrides.items():
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key '{key}'")
            vals[key] = value
        return RunConfig(vals)

    def to_dict(self) -> dict:
        return dict(self.values)


def parse_value(key: str, text: str):
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key '{key}'")
    parser, _ = SCHEMA[key]
    try:
        return parser(text.strip())
    except (ValueError, TypeError) as e:
        raise ConfigError(f"bad value for '{key}': {e}") from None


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Strict parse; every diagnostic names the file and line."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown config key '{key}'")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key '{key}'")
        try:
            values[key] = parse_value(key, val)
        except ConfigError as e:
            raise ConfigError(f"{source}:{lineno}: {e}") from None
    return RunConfig(values)


def load_config(path: str) -> RunConfig:
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config file: {e}") from None
    return parse_config(text, source=path)


def format_config(cfg: RunConfig) -> str:
    """Canonical text form; round-trips losslessly through parse_config."""
    lines = [f"{key} = {_fmt(cfg.values[key])}" for key in SCHEMA]
    return "\n".join(lines) + "\n"


def env_kwargs(cfg: RunConfig) -> dict:
    kind = cfg["env.kind"]
    if kind == "corr-bandit":
        sigma = np.asarray(cfg["env.sigma"], float)
        n = int(round(np.sqrt(sigma.size)))
        if n * n != sigma.size:
            raise ConfigError("env.sigma must have a square number of entries")
        return {"sigma": sigma.reshape(n, n), "box_halfwidth": cfg["env.box_halfwidth"]}
    if kind == "bimodal-bandit":
        centers = np.asarray(cfg["env.mode_centers"], float)
        if centers.size % 2 != 0:
            raise ConfigError("env.mode_centers must be (x, y) pairs")
        return {
            "centers": centers.reshape(-1, 2),
            "mode_scale": cfg["env.mode_scale"],
            "box_halfwidth": cfg["env.box_halfwidth"],
        }
    if kind == "point-mass":
        return {}
    raise ConfigError(f"unknown env kind '{kind}'")
