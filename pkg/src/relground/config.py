"""Experiment configuration: flat key=value text files, strict parsing.

Every key mirrors an :class:`ExperimentConfig` field; unknown keys are
errors. Domain knobs carry ``source_`` / ``target_`` prefixes and feed the
built-in domain-pair builder.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields

METHODS = ("none", "dann_lang", "dann_vis", "dann_both", "adv_cat", "cdan", "srda", "relxfer")
BOUND_KEYS = ("train_on_target_frac", "train_on_target_full", "finetune_on_target_full")
DIRECTIONS = ("src2tgt", "tgt2src")
FINETUNE_LR_MULTIPLIERS = (1.0, 0.5, 0.1)


class ConfigError(ValueError):
    """Invalid configuration file or option (CLI exit code 2)."""


@dataclass
class ExperimentConfig:
    seed: int = 0
    method: str = "none"
    direction: str = "src2tgt"

    # protocol
    pretrain_iterations: int = 3000
    finetune_iterations: int = 1000
    base_lr: float = 0.002
    target_fraction: float = 0.1
    eval_every: int = 50
    optimizer: str = "adam"
    batch_size: int = 8
    negatives_per_kind: int = 2
    dtype: str = "float64"       # float32 supported for training; verification is float64

    # model dims
    embed_dim: int = 64
    hidden_dim: int = 64
    obj_feature_dim: int = 32
    gnn_dim: int = 64
    graph_neighbors: int = 5
    graph_hop_cap: int = 2

    # loss
    margin: float = 0.1
    loss_lambda1: float = 1.0
    loss_lambda2: float = 1.0

    # adaptation
    adv_lambda: float = 0.1
    adv_hidden: int = 64
    attr_weight: float = 0.5
    srda_eps: float = 0.5
    srda_mode: str = "random"
    srda_weight: float = 0.1
    srda_warmup_frac: float = 0.5

    # data splits
    split_train: float = 0.8
    split_val: float = 0.1
    split_test: float = 0.1

    # domain pair knobs
    source_expressions: int = 2000
    source_scenes: int = 400
    target_expressions: int = 1000
    target_scenes: int = 200
    target_rotation_deg: float = 30.0
    target_offset_scale: float = 0.3
    noise_scale: float = 0.08
    variant_usage: float = 0.5
    n_target_variant_categories: int = 6
    n_source_variant_categories: int = 3

    @property
    def finetune_lr_multipliers(self) -> tuple[float, float, float]:
        return FINETUNE_LR_MULTIPLIERS

    def validate(self) -> None:
        if self.method not in METHODS + BOUND_KEYS:
            raise ConfigError(f"unknown method {self.method!r}")
        if self.direction not in DIRECTIONS:
            raise ConfigError(f"direction must be one of {DIRECTIONS}, got {self.direction!r}")
        if not (0.0 < self.target_fraction <= 1.0):
            raise ConfigError(f"target_fraction must be in (0, 1], got {self.target_fraction}")
        if self.pretrain_iterations < 0 or self.finetune_iterations < 0:
            raise ConfigError("iteration counts must be non-negative")
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be sgd|adam, got {self.optimizer!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32|float64, got {self.dtype!r}")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        if self.srda_mode not in ("random", "one-step-ascent"):
            raise ConfigError(f"unknown srda_mode {self.srda_mode!r}")
        total = self.split_train + self.split_val + self.split_test
        if abs(total - 1.0) > 1e-9 or min(self.split_train, self.split_val, self.split_test) <= 0:
            raise ConfigError("split fractions must be positive and sum to 1")
        if self.embed_dim * len_categories_upper_bound() > 16384:
            raise ConfigError("conditioned feature dimension exceeds the supported bound")


def len_categories_upper_bound() -> int:
    from .synthdata import CATEGORY_CONCEPTS
    return len(CATEGORY_CONCEPTS)


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _coerce(name: str, raw: str):
    kind = _FIELD_TYPES[name]
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {name!r}: {raw!r}") from exc


def parse_config_text(text: str) -> ExperimentConfig:
    cfg = ExperimentConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        setattr(cfg, key, _coerce(key, raw))
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text)


def config_text(cfg: ExperimentConfig) -> str:
    """Canonical serialization (sorted keys); parse(config_text(c)) == c."""
    lines = []
    for name in sorted(_FIELD_TYPES):
        lines.append(f"{name} = {getattr(cfg, name)}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(config_text(cfg).encode("utf-8")).hexdigest()[:16]
