"""Run configuration: every knob with defaults, a flat key=value file format,
and typed overrides. Invalid values raise ConfigError, which the CLI maps to
exit code 2."""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path
from typing import get_type_hints


class ConfigError(ValueError):
    """Bad configuration value, unknown key, or unparsable config file."""


@dataclass
class RunConfig:
    # data dimensions
    d_v: int = 64  # raw video feature dim
    d_t: int = 64  # raw text feature dim

    # model
    hidden_dim: int = 256
    n_heads: int = 8
    d_ffn: int = 1024
    dropout: float = 0.1
    encoder_dropout: float = 0.5  # inside the unimodal MLPs
    enc_layers: int = 2
    dec_layers: int = 2
    conv_blocks: int = 5
    conv_kernel: int = 3
    conv_placement: str = "between_encoders"
    num_queries: int = 10
    n_loops: int = 3
    attn_scale: str = "sqrt"

    # alignment
    queue_len: int = 65536
    momentum: float = 0.995
    alpha: float = 0.4
    tau: float = 0.07
    lambda_align: float = 0.6
    lambda_sim: float = 0.6

    # losses
    lambda_l1: float = 10.0
    lambda_giou: float = 1.0
    lambda_ce: float = 4.0
    bg_weight: float = 0.1
    lambda_marg: float = 1.0
    lambda_cont: float = 1.0
    margin: float = 0.2
    tau_rank: float = 0.5

    # training
    epochs: int = 250
    lr: float = 1e-4
    batch_size: int = 32
    weight_decay: float = 1e-4
    grad_clip: float = 0.1
    seed: int = 0
    eval_every: int = 0  # epochs between validation evals; 0 disables
    checkpoint_every: int = 0  # epochs between checkpoint snapshots; 0 = final only

    # synthetic data preset
    synth_train_samples: int = 256
    synth_val_samples: int = 64
    synth_t_min: int = 20
    synth_t_max: int = 40
    synth_n_min: int = 5
    synth_n_max: int = 12
    synth_noise_std: float = 0.1
    synth_moments_min: int = 1
    synth_moments_max: int = 2
    synth_pattern_bank: int = 32
    synth_clip_duration_s: float = 2.0

    def validate(self) -> None:
        c = self
        checks = [
            (c.d_v >= 1 and c.d_t >= 1, "feature dims must be >= 1"),
            (c.hidden_dim >= 8 and c.hidden_dim % 2 == 0, "hidden_dim must be even and >= 8"),
            (c.hidden_dim % c.n_heads == 0, "hidden_dim must be divisible by n_heads"),
            (0.0 <= c.dropout < 1.0, "dropout must be in [0, 1)"),
            (0.0 <= c.encoder_dropout < 1.0, "encoder_dropout must be in [0, 1)"),
            (c.enc_layers >= 1 and c.dec_layers >= 1, "encoder/decoder layers must be >= 1"),
            (c.conv_blocks >= 0, "conv_blocks must be >= 0"),
            (c.conv_kernel >= 1 and c.conv_kernel % 2 == 1, "conv_kernel must be odd"),
            (c.conv_placement in CONV_PLACEMENTS, f"conv_placement must be one of {CONV_PLACEMENTS}"),
            (c.num_queries >= 1, "num_queries must be >= 1"),
            (c.n_loops >= 1, "n_loops must be >= 1"),
            (c.attn_scale in ("sqrt", "linear"), "attn_scale must be 'sqrt' or 'linear'"),
            (c.queue_len >= 1, "queue_len must be >= 1"),
            (0.0 <= c.momentum < 1.0, "momentum must be in [0, 1)"),
            (0.0 <= c.alpha <= 1.0, "alpha must be in [0, 1]"),
            (c.tau > 0 and c.tau_rank > 0, "temperatures must be positive"),
            (
                min(c.lambda_align, c.lambda_sim, c.lambda_l1, c.lambda_giou, c.lambda_ce,
                    c.lambda_marg, c.lambda_cont, c.bg_weight) >= 0,
                "loss weights must be non-negative",
            ),
            (c.epochs >= 1, "epochs must be >= 1"),
            (c.lr > 0, "lr must be positive"),
            (c.batch_size >= 1, "batch_size must be >= 1"),
            (c.weight_decay >= 0, "weight_decay must be >= 0"),
            (c.grad_clip > 0, "grad_clip must be positive"),
            (c.eval_every >= 0 and c.checkpoint_every >= 0, "intervals must be >= 0"),
            (c.synth_train_samples >= 1 and c.synth_val_samples >= 1, "synth sample counts must be >= 1"),
            (1 <= c.synth_t_min <= c.synth_t_max, "synth t range invalid"),
            (1 <= c.synth_n_min <= c.synth_n_max, "synth n range invalid"),
            (1 <= c.synth_moments_min <= c.synth_moments_max, "synth moment range invalid"),
            (c.synth_noise_std >= 0, "synth_noise_std must be >= 0"),
            (c.synth_pattern_bank >= 1, "synth_pattern_bank must be >= 1"),
            (c.synth_clip_duration_s > 0, "synth_clip_duration_s must be positive"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


CONV_PLACEMENTS = (
    "before_v2t",
    "before_t2v",
    "before_encoder1",
    "between_encoders",
    "after_encoder2",
)

_FIELD_TYPES = get_type_hints(RunConfig)
_FIELD_NAMES = {f.name for f in fields(RunConfig)}


def _parse_value(key: str, raw: str):
    if key not in _FIELD_NAMES:
        raise ConfigError(f"unknown config key {key!r}")
    target = _FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if target is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if target is int:
            return int(raw)
        if target is float:
            return float(raw)
        return raw
    except ValueError as e:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {target.__name__}") from e


def load_config_file(path: str | Path) -> dict:
    """Parse a flat `key = value` file ('#' starts a comment) into typed values."""
    values: dict = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = line.split("=", 1)
        key = key.strip()
        values[key] = _parse_value(key, raw)
    return values


def parse_overrides(overrides: list[str] | None) -> dict:
    """Typed values from `key=value` strings."""
    values: dict = {}
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, raw = item.split("=", 1)
        values[key.strip()] = _parse_value(key.strip(), raw)
    return values


def build_config(
    config_path: str | Path | None = None,
    overrides: list[str] | None = None,
) -> RunConfig:
    """Defaults, then config file values, then `key=value` override strings."""
    values: dict = {}
    if config_path is not None:
        values.update(load_config_file(config_path))
    values.update(parse_overrides(overrides))
    config = RunConfig(**values)
    config.validate()
    return config


def save_config_file(config: RunConfig, path: str | Path) -> None:
    lines = [f"{k} = {v}" for k, v in config.to_dict().items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
