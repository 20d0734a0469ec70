"""Toolkit configuration: defaults, flat ``key = value`` files, validation.

Example file::

    # stage-2 colour weight
    lambda_dab = 1.5
    stain_matrix = 0.650 0.704 0.286  0.072 0.990 0.105  0.268 0.570 0.776
    stage3.learning_rate = 0.004

Keys not listed in :data:`KEYS` are rejected.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .deconv import DEFAULT_EPS, DEFAULT_I0, DEFAULT_STAIN_ROWS, StainMatrix

ENV_VAR = "PROGSTAIN_CONFIG"
_SECTION = "progstain"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.07
    step: int = 0
    total_steps: int = 1
    lambda_patchnce: float = 10.0
    lambda_asp: float = 10.0
    lambda_gp: float = 10.0
    lambda_dab: float = 0.5
    lambda_grad: float = 1.0
    pyramid_levels: int = 3
    schedule: str = "linear"
    weight_map: str = "affine"

    def validate(self) -> None:
        from .losses import SCHEDULES, WEIGHT_MAPS

        if not self.tau > 0:
            raise ConfigError("tau must be positive")
        if self.total_steps <= 0:
            raise ConfigError("total_steps must be positive")
        if not 0 <= self.step <= self.total_steps:
            raise ConfigError("step must satisfy 0 <= step <= total_steps")
        for name in ("lambda_patchnce", "lambda_asp", "lambda_gp", "lambda_dab", "lambda_grad"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.pyramid_levels < 1:
            raise ConfigError("pyramid_levels must be >= 1")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.weight_map not in WEIGHT_MAPS:
            raise ConfigError(f"unknown weight_map {self.weight_map!r}")


@dataclass(frozen=True)
class StageConfig:
    stage: int = 2
    optimizer: str = "adam"
    learning_rate: float = 2e-3
    max_iters: int = 500
    stop_tol: float = 1e-8
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self) -> None:
        if self.stage not in (2, 3):
            raise ConfigError("refinement stage must be 2 or 3")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.max_iters < 1:
            raise ConfigError("max_iters must be >= 1")
        if self.stop_tol < 0:
            raise ConfigError("stop_tol must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.adam_eps <= 0:
            raise ConfigError("invalid Adam parameters")


@dataclass(frozen=True)
class EmbedConfig:
    seed: int = 0
    patch: int = 8
    dim: int = 64
    stride: int = 4

    def validate(self) -> None:
        if self.patch < 1 or self.dim < 1 or self.stride < 1:
            raise ConfigError("embedding patch, dim and stride must be >= 1")


@dataclass(frozen=True)
class ToolkitConfig:
    stain_matrix: tuple = tuple(v for row in DEFAULT_STAIN_ROWS for v in row)
    i0: float = DEFAULT_I0
    eps: float = DEFAULT_EPS
    loss: LossConfig = field(default_factory=LossConfig)
    stage2: StageConfig = field(default_factory=lambda: StageConfig(stage=2))
    stage3: StageConfig = field(default_factory=lambda: StageConfig(stage=3))
    embed: EmbedConfig = field(default_factory=EmbedConfig)

    def validate(self) -> "ToolkitConfig":
        if len(self.stain_matrix) != 9:
            raise ConfigError("stain_matrix needs nine numbers")
        try:
            StainMatrix.from_flat(self.stain_matrix)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if not self.i0 > 0:
            raise ConfigError("i0 must be positive")
        if not self.eps > 0:
            raise ConfigError("eps must be positive")
        self.loss.validate()
        self.stage2.validate()
        self.stage3.validate()
        if self.stage2.stage != 2 or self.stage3.stage != 3:
            raise ConfigError("stage2/stage3 sections carry the wrong stage index")
        self.embed.validate()
        return self

    def stains(self) -> StainMatrix:
        return StainMatrix.from_flat(self.stain_matrix)


# flat key -> (section attribute or None, field name)
def _flat_keys() -> dict[str, tuple[str | None, str]]:
    keys: dict[str, tuple[str | None, str]] = {
        "stain_matrix": (None, "stain_matrix"),
        "i0": (None, "i0"),
        "eps": (None, "eps"),
    }
    for f in fields(LossConfig):
        keys[f.name] = ("loss", f.name)
    for section in ("stage2", "stage3"):
        for f in fields(StageConfig):
            if f.name != "stage":
                keys[f"{section}.{f.name}"] = (section, f.name)
    for f in fields(EmbedConfig):
        keys[f"embed_{f.name}"] = ("embed", f.name)
    return keys


KEYS = _flat_keys()


def _coerce(raw: str, like):
    if isinstance(like, bool):
        return raw.lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    if isinstance(like, tuple):
        return tuple(float(v) for v in raw.replace(",", " ").split())
    return raw.strip()


def parse_config(text: str, source: str = "<string>") -> ToolkitConfig:
    parser = configparser.ConfigParser(
        delimiters=("=",), comment_prefixes=("#",), inline_comment_prefixes=("#",),
        interpolation=None, default_section="__defaults__")
    parser.optionxform = str
    try:
        parser.read_string(f"[{_SECTION}]\n{text}", source=source)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {source}: {exc}") from exc
    extra = [s for s in parser.sections() if s != _SECTION]
    if extra:
        raise ConfigError(f"{source}: sections are not supported ({extra[0]!r})")

    cfg = ToolkitConfig()
    updates: dict[str | None, dict[str, object]] = {}
    for key, raw in parser.items(_SECTION):
        key = key.strip().lower()
        if key not in KEYS:
            raise ConfigError(f"{source}: unknown key {key!r}")
        section, name = KEYS[key]
        owner = cfg if section is None else getattr(cfg, section)
        try:
            value = _coerce(raw, getattr(owner, name))
        except ValueError as exc:
            raise ConfigError(f"{source}: bad value for {key!r}: {raw!r}") from exc
        updates.setdefault(section, {})[name] = value

    top = dict(updates.pop(None, {}))
    for section, vals in updates.items():
        top[section] = replace(getattr(cfg, section), **vals)
    return replace(cfg, **top).validate()


def load_config(path=None) -> ToolkitConfig:
    """Load a config file, falling back to ``$PROGSTAIN_CONFIG``, then defaults."""
    if path is None:
        path = os.environ.get(ENV_VAR) or None
    if path is None:
        return ToolkitConfig().validate()
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, source=str(path))


def dump_config(cfg: ToolkitConfig) -> str:
    """Serialise every key; ``parse_config(dump_config(c)) == c``."""
    lines = []
    for key, (section, name) in KEYS.items():
        owner = cfg if section is None else getattr(cfg, section)
        value = getattr(owner, name)
        if isinstance(value, tuple):
            text = " ".join(repr(float(v)) for v in value)
        else:
            text = repr(value) if isinstance(value, float) else str(value)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"


def config_dict(cfg: ToolkitConfig) -> dict:
    return asdict(cfg)
