"""Experiment configuration: typed defaults, a flat key-value file format,
and strict validation (unknown keys and bad values are rejected by name).

File format: one ``key = value`` per line, ``#`` comments, blank lines
allowed. Every key is optional; see DEFAULTS for the schema. The full
documented schema lives in the README.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .data import SyntheticSpec
from .federation import VARIANTS, Hyperparams, VariantFlags


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


@dataclass(frozen=True)
class ExperimentConfig:
    variant: str = "FedKA"
    rounds: int = 200
    batches_per_round: int = 32
    batch_size: int = 16
    lr: float = 0.0003
    gamma: float = 5.0
    voting_size: int | None = 512  # None: all target-train samples
    mmd_group: int = 8
    encoder_hidden: int = 500
    feature_dim: int = 50
    classifier_hidden: int = 100
    seed: int = 0
    replicates: int = 5
    data: str = "synthetic"  # "synthetic" | path to a domain manifest
    group_effect: bool = True
    out: str = "runs"
    # synthetic task knobs (ignored when data is a manifest path)
    synthetic_dim: int = 20
    synthetic_classes: int = 5
    synthetic_mean_scale: float = 3.0
    synthetic_noise_sigma: float = 1.0
    synthetic_source_angles: tuple[float, ...] = (15.0, 30.0, 45.0, 60.0)
    synthetic_target_angle: float = 75.0
    synthetic_samples_per_source: int = 2000
    synthetic_target_train: int = 1024
    synthetic_target_test: int = 1000
    synthetic_rotation_planes: int = 4

    def variant_flags(self) -> VariantFlags:
        return VariantFlags.from_tag(self.variant)

    def hyperparams(self) -> Hyperparams:
        return Hyperparams(
            batch_size=self.batch_size,
            batches_per_round=self.batches_per_round,
            rounds=self.rounds,
            lr=self.lr,
            gamma=self.gamma,
            voting_size=self.voting_size,
            mmd_group=self.mmd_group,
            ge_enabled=self.group_effect,
        )

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(
            dim=self.synthetic_dim,
            classes=self.synthetic_classes,
            mean_scale=self.synthetic_mean_scale,
            noise_sigma=self.synthetic_noise_sigma,
            source_angles_deg=self.synthetic_source_angles,
            target_angle_deg=self.synthetic_target_angle,
            samples_per_source=self.synthetic_samples_per_source,
            target_train_samples=self.synthetic_target_train,
            target_test_samples=self.synthetic_target_test,
            rotation_planes=self.synthetic_rotation_planes,
        )


def _parse_bool(raw: str) -> bool:
    low = raw.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_voting_size(raw: str):
    if raw.lower() == "all":
        return None
    return int(raw)


def _parse_angles(raw: str) -> tuple[float, ...]:
    return tuple(float(p) for p in raw.split(",") if p.strip())


_PARSERS = {
    "variant": str,
    "rounds": int,
    "batches_per_round": int,
    "batch_size": int,
    "lr": float,
    "gamma": float,
    "voting_size": _parse_voting_size,
    "mmd_group": int,
    "encoder_hidden": int,
    "feature_dim": int,
    "classifier_hidden": int,
    "seed": int,
    "replicates": int,
    "data": str,
    "group_effect": _parse_bool,
    "out": str,
    "synthetic_dim": int,
    "synthetic_classes": int,
    "synthetic_mean_scale": float,
    "synthetic_noise_sigma": float,
    "synthetic_source_angles": _parse_angles,
    "synthetic_target_angle": float,
    "synthetic_samples_per_source": int,
    "synthetic_target_train": int,
    "synthetic_target_test": int,
    "synthetic_rotation_planes": int,
}

_POSITIVE_KEYS = (
    "rounds",
    "batches_per_round",
    "batch_size",
    "lr",
    "gamma",
    "encoder_hidden",
    "feature_dim",
    "classifier_hidden",
    "replicates",
    "synthetic_dim",
    "synthetic_classes",
    "synthetic_mean_scale",
    "synthetic_noise_sigma",
    "synthetic_samples_per_source",
    "synthetic_target_train",
    "synthetic_target_test",
    "synthetic_rotation_planes",
)


def validate_config(cfg: ExperimentConfig) -> ExperimentConfig:
    for key in _POSITIVE_KEYS:
        if getattr(cfg, key) <= 0:
            raise ConfigError(f"{key}: must be positive, got {getattr(cfg, key)}")
    if cfg.voting_size is not None and cfg.voting_size <= 0:
        raise ConfigError(f"voting_size: must be positive or 'all', got {cfg.voting_size}")
    if cfg.mmd_group < 2:
        raise ConfigError(f"mmd_group: must be >= 2, got {cfg.mmd_group}")
    if cfg.variant.strip().lower() not in VARIANTS:
        raise ConfigError(
            f"variant: unknown tag {cfg.variant!r}; expected one of: {', '.join(VARIANTS)}"
        )
    if cfg.data == "synthetic":
        try:
            cfg.synthetic_spec()
        except ValueError as exc:
            raise ConfigError(f"synthetic task: {exc}") from exc
    return cfg


def config_from_items(items: dict[str, str]) -> ExperimentConfig:
    """Build a config from raw string key-values, applying defaults for
    absent keys and rejecting unknown ones."""
    kwargs = {}
    for key, raw in items.items():
        parser = _PARSERS.get(key)
        if parser is None:
            raise ConfigError(f"unknown key {key!r}")
        try:
            kwargs[key] = parser(raw)
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from exc
    return validate_config(ExperimentConfig(**kwargs))


def parse_config(path) -> ExperimentConfig:
    """Parse a flat key-value config file; an empty file yields all defaults."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from exc
    items: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, _, raw = stripped.partition("=")
        key, raw = key.strip(), raw.strip()
        if key in items:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        items[key] = raw
    return config_from_items(items)


def override(cfg: ExperimentConfig, **kwargs) -> ExperimentConfig:
    """Apply command-line overrides (None values are ignored) and re-validate."""
    updates = {k: v for k, v in kwargs.items() if v is not None}
    return validate_config(replace(cfg, **updates))
