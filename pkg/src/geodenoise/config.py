"""Run configuration: a flat `key = value` text format.

Lines hold one `key = value` each; `#` starts a comment; blank lines are
ignored. Unknown keys are errors so typos fail loudly. `none` clears the
optional cutoff. The canonical serialization (sorted keys) is echoed into
checkpoints and compared when resuming.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .baselines import BASELINE_NAMES
from .denoise import NoiseSchedule, ScoreNetConfig, build_schedule
from .encoder import EncoderConfig

__all__ = ["TrainingConfig", "ConfigError", "parse_config", "load_config"]

OBJECTIVES = ("ddm", "none") + BASELINE_NAMES


class ConfigError(ValueError):
    pass


@dataclass
class TrainingConfig:
    objective: str = "ddm"
    seed: int = 0
    epochs: int = 1
    batch_size: int = 1
    learning_rate: float = 5e-4
    lr_min: float = 0.0
    schedule: str = "cosine"
    num_levels: int = 50
    sigma_min: float = 0.01
    sigma_max: float = 10.0
    beta: float = 0.2
    coord_sigma: float = 0.3
    mask_ratio: float = 0.0
    type_mask_ratio: float = 0.15
    temperature: float = 0.1
    embedding_dim: int = 64
    num_layers: int = 3
    rbf_count: int = 32
    rbf_gamma: float = 10.0
    rbf_dmax: float = 10.0
    cutoff: float | None = None
    condition_extra_noise: bool = False
    literal_shift: bool = False
    wall_clock: bool = False
    dataset: str = ""
    labels: str = ""
    train_frac: float = 0.8
    val_frac: float = 0.1

    def validate(self) -> None:
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"unknown objective {self.objective!r}")
        if self.schedule != "cosine":
            raise ConfigError(f"unknown learning-rate schedule {self.schedule!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate < 0 or self.lr_min < 0:
            raise ConfigError("learning rates must be non-negative")
        if self.num_levels < 1:
            raise ConfigError("num_levels must be >= 1")
        if not 0 < self.sigma_min <= self.sigma_max:
            raise ConfigError("need 0 < sigma_min <= sigma_max")
        if self.num_levels == 1 and self.sigma_min != self.sigma_max:
            raise ConfigError("a single-level ladder needs sigma_min == sigma_max")
        if self.coord_sigma < 0:
            raise ConfigError("coord_sigma must be non-negative")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ConfigError("mask_ratio must lie in [0, 1)")
        if not 0.0 < self.type_mask_ratio < 1.0:
            raise ConfigError("type_mask_ratio must lie in (0, 1)")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.objective in ("infonce", "ebm_nce") and self.batch_size < 2:
            raise ConfigError(f"objective {self.objective} needs batch_size >= 2")
        if not 0 < self.train_frac < 1 or not 0 < self.val_frac < 1:
            raise ConfigError("split fractions must lie in (0, 1)")
        if self.train_frac + self.val_frac >= 1:
            raise ConfigError("train_frac + val_frac must leave room for a test split")
        self.encoder_config()  # field validation

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            embedding_dim=self.embedding_dim,
            num_layers=self.num_layers,
            rbf_count=self.rbf_count,
            rbf_gamma=self.rbf_gamma,
            rbf_dmax=self.rbf_dmax,
            cutoff=self.cutoff,
        )

    def score_config(self) -> ScoreNetConfig:
        return ScoreNetConfig(
            dist_hidden=self.embedding_dim, fusion_hidden=self.embedding_dim
        )

    def noise_schedule(self) -> NoiseSchedule:
        return build_schedule(self.num_levels, self.sigma_min, self.sigma_max, self.beta)

    def canonical_text(self) -> str:
        lines = []
        for f in sorted(fields(self), key=lambda f: f.name):
            value = getattr(self, f.name)
            if value is None:
                rendered = "none"
            elif isinstance(value, bool):
                rendered = "true" if value else "false"
            elif isinstance(value, float):
                rendered = repr(value)
            else:
                rendered = str(value)
            lines.append(f"{f.name} = {rendered}")
        return "\n".join(lines) + "\n"

    def encoder_keys_match(self, other: "TrainingConfig") -> bool:
        keys = ("embedding_dim", "num_layers", "rbf_count", "rbf_gamma", "rbf_dmax", "cutoff")
        return all(getattr(self, k) == getattr(other, k) for k in keys)


_FIELD_TYPES = {f.name: f.type for f in fields(TrainingConfig)}


def _convert(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    if kind == "bool":
        if raw not in ("true", "false"):
            raise ConfigError(f"boolean key {key} must be true or false, got {raw!r}")
        return raw == "true"
    if kind == "int":
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"key {key} expects an integer, got {raw!r}") from None
    if kind == "float":
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"key {key} expects a number, got {raw!r}") from None
    if kind == "float | None":
        if raw == "none":
            return None
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"key {key} expects a number or none, got {raw!r}") from None
    return raw


def parse_config(text: str) -> TrainingConfig:
    cfg = TrainingConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value' at line {lineno}: {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown key {key!r} at line {lineno}")
        setattr(cfg, key, _convert(key, value))
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> TrainingConfig:
    return parse_config(Path(path).read_text())
