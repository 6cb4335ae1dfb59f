"""Artifact-wide configuration schema.

One JSON document with the sections ``encoder``, ``crossmodal``, ``loss``,
``train``, ``data`` and ``eval``.  Overrides use dotted paths
(``train.base_lr=1e-3``) and are type-checked against the dataclass fields.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable


class ConfigError(ValueError):
    """Unknown key, bad type, or violated invariant in a config document."""


@dataclass
class EncoderConfig:
    image_height: int = 32
    image_width: int = 16
    patch: int = 8
    stride: int = 8
    d_v: int = 64
    d_t: int = 32
    heads: int = 4
    visual_layers: int = 2
    text_layers: int = 1
    vocab_size: int = 64
    max_text_len: int = 12
    mlp_ratio: int = 4
    pad_id: int = 0

    def validate(self) -> None:
        if self.patch > min(self.image_height, self.image_width):
            raise ConfigError("patch must not exceed min(image_height, image_width)")
        if self.stride < 1 or self.patch < 1:
            raise ConfigError("patch and stride must be >= 1")
        if self.d_v % self.heads or self.d_t % self.heads:
            raise ConfigError("d_v and d_t must be divisible by heads")
        if not 0 <= self.pad_id < self.vocab_size:
            raise ConfigError("pad_id must be a valid vocabulary id")

    @property
    def grid(self) -> tuple[int, int]:
        return (
            (self.image_height - self.patch) // self.stride + 1,
            (self.image_width - self.patch) // self.stride + 1,
        )

    @property
    def num_patches(self) -> int:
        rows, cols = self.grid
        return rows * cols


@dataclass
class CrossModalConfig:
    heads: int = 4
    stack_layers: int = 4
    mlp_ratio: int = 4

    def validate(self) -> None:
        if self.heads < 1 or self.stack_layers < 0:
            raise ConfigError("crossmodal.heads >= 1 and stack_layers >= 0 required")


@dataclass
class LossConfig:
    margin: float = 0.3
    lam: float = 0.5
    mining: str = "batch_hard"
    use_cross: bool = True
    use_mask: bool = True
    invert_mask: bool = False

    def validate(self) -> None:
        if self.margin < 0 or self.lam < 0:
            raise ConfigError("loss.margin and loss.lam must be >= 0")
        if self.mining not in ("batch_hard", "all_valid"):
            raise ConfigError(f"unknown mining mode {self.mining!r}")
        if self.lam > 0 and not self.use_cross:
            raise ConfigError("the diversity loss needs the cross-modal branch (use_cross)")


@dataclass
class TrainConfig:
    # the schedule length of the original recipe; at 30 epochs (120 steps on the
    # default corpus) the cross-modal rows are still undertrained
    base_lr: float = 1e-3
    epochs: int = 60
    warmup_epochs: int = 10
    weight_decay: float = 1e-4
    seed: int = 0
    P: int = 8
    K: int = 4
    out_dir: str = "run"

    def validate(self) -> None:
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError("need 0 <= warmup_epochs < epochs")
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be > 0")
        if self.P < 2 or self.K < 2:
            raise ConfigError("PK sampling needs P >= 2 and K >= 2")


@dataclass
class DataConfig:
    root: str = "corpus"
    num_ids: int = 32
    images_per_id: int = 8
    num_cams: int = 4
    num_scenes: int = 4
    image_height: int = 32
    image_width: int = 16
    occluder_prob: float = 0.3
    noise: float = 0.05
    seed: int = 0
    num_train_ids: int = 16

    def validate(self) -> None:
        if self.images_per_id < 2:
            raise ConfigError("images_per_id must be >= 2")
        if self.num_cams < 2:
            raise ConfigError("num_cams must be >= 2")
        if not 0 < self.num_train_ids <= self.num_ids:
            raise ConfigError("num_train_ids must lie in (0, num_ids]")
        if not 0.0 <= self.occluder_prob <= 1.0:
            raise ConfigError("occluder_prob must lie in [0, 1]")


@dataclass
class EvalConfig:
    composition: str = "concat"
    jobs: int = 1

    def validate(self) -> None:
        if self.composition not in ("backbone", "cross", "concat"):
            raise ConfigError(f"unknown composition {self.composition!r}")


@dataclass
class Config:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    crossmodal: CrossModalConfig = field(default_factory=CrossModalConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "Config":
        for f in fields(self):
            getattr(self, f.name).validate()
        if (self.data.image_height, self.data.image_width) != (
            self.encoder.image_height,
            self.encoder.image_width,
        ):
            raise ConfigError("data and encoder image geometry disagree")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "Config":
        cfg = cls()
        for section, values in doc.items():
            if section not in SECTIONS:
                raise ConfigError(f"unknown config section {section!r}")
            if not isinstance(values, dict):
                raise ConfigError(f"section {section!r} must be an object")
            for key, value in values.items():
                _assign(cfg, f"{section}.{key}", value)
        return cfg

    def replace(self, **sections: Any) -> "Config":
        return dataclasses.replace(self, **sections)


SECTIONS = {f.name: f.type for f in fields(Config)}


def _field_type(section_obj: Any, key: str) -> type:
    for f in fields(section_obj):
        if f.name == key:
            return {"int": int, "float": float, "bool": bool, "str": str}[f.type]
    raise ConfigError(f"unknown config key {type(section_obj).__name__}.{key}")


def _coerce(value: Any, typ: type, path: str) -> Any:
    if typ is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0"):
            return value.lower() in ("true", "1")
        raise ConfigError(f"{path}: expected bool, got {value!r}")
    if typ is int:
        if isinstance(value, bool):
            raise ConfigError(f"{path}: expected int, got {value!r}")
        if isinstance(value, int):
            return value
        if isinstance(value, str):
            try:
                return int(value)
            except ValueError:
                pass
        raise ConfigError(f"{path}: expected int, got {value!r}")
    if typ is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                pass
        raise ConfigError(f"{path}: expected float, got {value!r}")
    if not isinstance(value, str):
        raise ConfigError(f"{path}: expected str, got {value!r}")
    return value


def _assign(cfg: Config, path: str, value: Any) -> None:
    parts = path.split(".")
    if len(parts) != 2 or parts[0] not in SECTIONS:
        raise ConfigError(f"unknown config key {path!r}")
    section = getattr(cfg, parts[0])
    typ = _field_type(section, parts[1])
    setattr(section, parts[1], _coerce(value, typ, path))


def apply_overrides(cfg: Config, overrides: Iterable[str]) -> Config:
    """Apply ``key=value`` strings in order; values are parsed per field type."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        _assign(cfg, key.strip(), value.strip())
    return cfg


def load_config(path: str | Path | None = None, overrides: Iterable[str] = ()) -> Config:
    if path is None:
        cfg = Config()
    else:
        with open(path, encoding="utf-8") as fh:
            cfg = Config.from_dict(json.load(fh))
    return apply_overrides(cfg, overrides).validate()


def describe_keys() -> list[tuple[str, str, Any]]:
    """(dotted key, type name, default) for every config field."""
    out = []
    default = Config()
    for section in SECTIONS:
        obj = getattr(default, section)
        for f in fields(obj):
            out.append((f"{section}.{f.name}", f.type, getattr(obj, f.name)))
    return out
