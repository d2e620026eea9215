"""Flat ``key = value`` run configuration shared by every CLI stage."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Mapping

OUT_ENV = "AFFECTRL_OUT"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = ""
    lexicon: str = ""
    circumplex: str = ""
    # data
    dialogues: int = 300
    vocab_max: int = 512
    # language model
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_seq_len: int = 64
    lm_steps: int = 800
    lm_batch_size: int = 32
    lm_lr: float = 3e-3
    # reward model
    rm_steps: int = 1000
    rm_lr: float = 3e-2
    rm_mu: float = 1.0
    rm_pooling: str = "mean"
    rm_freeze_lm: bool = True
    rm_holdout: float = 0.2
    # PPO
    beta: float = 0.05
    beta_mode: str = "fixed"
    kl_target: float = 6.0
    clip_eps: float = 0.2
    ppo_lr: float = 1e-3
    value_lr: float = 1e-2
    episodes: int = 50
    rollouts: int = 64
    ppo_epochs: int = 4
    minibatch_size: int = 32
    gamma: float = 1.0
    gae_lambda: float = 0.95
    max_response_len: int = 12
    refresh_reward_model: bool = False
    checkpoint_every: int = 0
    reward_source: str = "model"
    # simulated user
    lam: float = 1.0
    noise: float = 0.0
    n_prompts: int = 64
    # evaluation / chat
    eval_samples: int = 256
    temperature: float = 1.0
    top_k: int = 0

    def validate(self) -> RunConfig:
        if self.rm_pooling not in ("last", "mean"):
            raise ConfigError("rm_pooling must be 'last' or 'mean'")
        if self.beta_mode not in ("fixed", "adaptive"):
            raise ConfigError("beta_mode must be 'fixed' or 'adaptive'")
        if self.reward_source not in ("model", "oracle"):
            raise ConfigError("reward_source must be 'model' or 'oracle'")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("lam must lie in [0, 1]")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")
        if self.vocab_max < 5:
            raise ConfigError("vocab_max must be >= 5")
        if self.dialogues < 1:
            raise ConfigError("dialogues must be >= 1")
        if self.episodes < 0:
            raise ConfigError("episodes must be >= 0")
        if self.temperature < 0:
            raise ConfigError("temperature must be >= 0")
        return self

    def out_path(self) -> Path:
        return Path(self.out_dir)

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    kind = _FIELDS[key].type
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r} (expected {kind})") from None
    return raw


def parse_pairs(text: str, source: str = "<config>") -> dict[str, object]:
    """Parse ``key = value`` lines; blank lines and ``#`` comments are skipped."""
    out: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        out[key] = _coerce(key, value)
    return out


def resolve(
    config_file: str | Path | None = None,
    overrides: Mapping[str, object] | None = None,
    environ: Mapping[str, str] | None = None,
) -> RunConfig:
    """Defaults, then the config file, then explicit overrides; output dir falls back to $AFFECTRL_OUT."""
    values: dict[str, object] = {}
    if config_file is not None:
        path = Path(config_file)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        values.update(parse_pairs(path.read_text(encoding="utf-8"), str(path)))
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _coerce(key, value) if isinstance(value, str) else value
    cfg = dataclasses.replace(RunConfig(), **values)
    if not cfg.out_dir:
        env = os.environ if environ is None else environ
        cfg.out_dir = env.get(OUT_ENV, "runs")
    return cfg.validate()
