"""Run configuration: a JSON file merged with command-line overrides."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .encoders import EncoderConfig
from .learn import FocalConfig, StagePlan
from .prompt_bank import bundled_bank_path
from .synth import SynthConfig
from .textures import TextureConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderSection:
    level_grids: tuple[tuple[int, int], ...] = ((16, 16), (8, 8), (8, 8), (4, 4))
    level_steps: tuple[int, ...] = (1, 1, 2, 2)
    c1: int = 32
    c2: int = 32
    c3: int = 16


@dataclass(frozen=True)
class DatasetSection:
    n_normal: int = 200
    n_abnormal: int = 200
    holdout_per_class: int = 50


@dataclass(frozen=True)
class TrainSection:
    epochs: int = 20
    base_lr: float = 0.5
    warmup_frac: float = 0.05
    batch_size: int = 16
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    head_hidden: int = 64
    l3: int = 4
    c_mid: int = 8


@dataclass(frozen=True)
class PromptSection:
    path: str | None = None  # None selects the bundled bank
    class_name: str = "stripes"


@dataclass(frozen=True)
class PathSection:
    # relative entries resolve against the --out directory
    dataset: str = "dataset"
    checkpoints: str = "checkpoints"
    reports: str = "reports"


@dataclass(frozen=True)
class RunConfig:
    seed: int
    out: str = "."
    image_size: tuple[int, int] = (64, 64)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    texture: TextureConfig = field(default_factory=TextureConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    train: TrainSection = field(default_factory=TrainSection)
    prompts: PromptSection = field(default_factory=PromptSection)
    paths: PathSection = field(default_factory=PathSection)

    # derived views -----------------------------------------------------------

    def encoder_config(self) -> EncoderConfig:
        e = self.encoder
        return EncoderConfig(self.seed, self.image_size, e.level_grids, e.c1, e.c2, e.c3, e.level_steps)

    def texture_config(self) -> TextureConfig:
        return dataclasses.replace(self.texture, size=self.image_size[0])

    def focal(self) -> FocalConfig:
        return FocalConfig(self.train.focal_alpha, self.train.focal_gamma)

    def plans(self) -> list[StagePlan]:
        t = self.train
        return [StagePlan(s, t.epochs, t.base_lr, t.warmup_frac, t.batch_size) for s in (1, 2, 3)]

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else Path(self.out) / p

    @property
    def dataset_dir(self) -> Path:
        return self.resolve(self.paths.dataset)

    @property
    def checkpoint_dir(self) -> Path:
        return self.resolve(self.paths.checkpoints)

    @property
    def report_dir(self) -> Path:
        return self.resolve(self.paths.reports)

    def prompt_bank_path(self) -> Path:
        return Path(self.prompts.path) if self.prompts.path else bundled_bank_path()

    def validate(self) -> "RunConfig":
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed!r}")
        h, w = self.image_size
        if h != w:
            raise ConfigError("procedural textures are square; image_size must have equal sides")
        try:
            self.encoder_config()
            self.focal()
            self.plans()
            self.texture_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        d = self.dataset
        if min(d.n_normal, d.n_abnormal, d.holdout_per_class) < 0:
            raise ConfigError("dataset counts must be non-negative")
        if not self.prompt_bank_path().is_file():
            raise ConfigError(f"prompt bank not found: {self.prompt_bank_path()}")
        out = Path(self.out)
        if out.exists() and not out.is_dir():
            raise ConfigError(f"--out {out} exists and is not a directory")
        return self

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _tupled(value):
    """Convert JSON lists to the (nested) tuples the frozen dataclasses expect."""
    if isinstance(value, list):
        return tuple(_tupled(v) for v in value)
    return value


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        sub = _SECTIONS.get(name) if cls is RunConfig else None
        if sub is not None:
            kwargs[name] = _build(sub, value, f"{where}.{name}" if where else name)
        else:
            kwargs[name] = _tupled(value)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


_SECTIONS = {
    "encoder": EncoderSection,
    "texture": TextureConfig,
    "synth": SynthConfig,
    "dataset": DatasetSection,
    "train": TrainSection,
    "prompts": PromptSection,
    "paths": PathSection,
}


def _set_path(doc: dict, dotted: str, value: Any):
    keys = dotted.split(".")
    node = doc
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--set {dotted}: {k} is not a section")
    node[keys[-1]] = value


def parse_assignment(text: str) -> tuple[str, Any]:
    """``key.path=value`` with ``value`` parsed as JSON, falling back to a bare string."""
    if "=" not in text:
        raise ConfigError(f"--set expects key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_config(
    path: str | Path | None = None,
    seed: int | None = None,
    out: str | Path | None = None,
    overrides: list[tuple[str, Any]] = (),
) -> RunConfig:
    """Merge defaults, the JSON file at ``path`` and flag overrides (flags win)."""
    doc: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            doc = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{p}: top level must be an object")
    for key, value in overrides:
        _set_path(doc, key, value)
    if seed is not None:
        doc["seed"] = seed
    if out is not None:
        doc["out"] = str(out)
    if "seed" not in doc:
        raise ConfigError("a seed is required (--seed or \"seed\" in the config file)")
    return _build(RunConfig, doc, "").validate()
