"""Run configuration: flat INI text with one section per module.

Every run starts from ``profiles/base.ini``, then applies a named profile
(``esc10``, ``esc50``, ``urbansound8k``, ``dcase2017`` or ``desk``), then an
optional user file. Unknown sections or keys are rejected so typos surface
before any stage runs.
"""

from __future__ import annotations

import configparser
import dataclasses
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

from . import wccgan
from .forest import ForestParams
from .scalogram import ScalogramConfig

PROFILES = ("esc10", "esc50", "urbansound8k", "dcase2017", "desk")


class ConfigError(ValueError):
    """Malformed or inconsistent configuration."""


@dataclass(frozen=True)
class DatasetSection:
    name: str = "custom"
    manifest: str = ""  # CSV path; relative paths resolve against the config file's directory
    classes: tuple = ()


@dataclass(frozen=True)
class AugmentSection:
    enabled: bool = True
    pitch_factors: tuple = (0.75, 0.9, 1.15, 1.5)


@dataclass(frozen=True)
class ScalogramSection:
    width: int = 768
    height: int = 384
    frame_ms: float = 50.0
    overlap: float = 0.5
    sample_rate: int = 8000
    fmin: float = 20.0


@dataclass(frozen=True)
class GanSection:
    enabled: bool = True
    preset: str = "urbansound8k"
    n_res_blocks: int = 3
    epochs: int = 120
    patience: int = 10
    batch_size: int = 4
    lr: float = 2e-4
    gen_channels: tuple = (64, 128)
    disc_channels: tuple = (64, 128)
    net_shape: tuple = (96, 192)
    val_fraction: float = 0.1
    dtype: str = "float32"
    n_generated: int = 0            # absolute count per fold; 0 means use generated_fraction
    generated_fraction: float = 0.5  # of the training originals
    confusion_trees: int = 500
    include_shifted: bool = True
    max_pair_samples: int = 0       # per side of a pair; 0 keeps every sample
    enhance_generated: bool = True


@dataclass(frozen=True)
class SurfSection:
    threshold: float = 400.0
    nms: float = 0.6
    octaves: int = 2


@dataclass(frozen=True)
class CodebookSection:
    k: int = 512
    max_iters: int = 100


@dataclass(frozen=True)
class ForestSection:
    n_trees: int = 500
    tree_grid: tuple = ()
    max_depth: int = 32
    min_split_fraction: float = 0.02
    allow_shallow: bool = False


@dataclass(frozen=True)
class EvaluationSection:
    folds: int = 5


SECTIONS = {
    "dataset": DatasetSection,
    "augment": AugmentSection,
    "scalogram": ScalogramSection,
    "gan": GanSection,
    "surf": SurfSection,
    "codebook": CodebookSection,
    "forest": ForestSection,
    "evaluation": EvaluationSection,
}


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    scalogram: ScalogramSection = field(default_factory=ScalogramSection)
    gan: GanSection = field(default_factory=GanSection)
    surf: SurfSection = field(default_factory=SurfSection)
    codebook: CodebookSection = field(default_factory=CodebookSection)
    forest: ForestSection = field(default_factory=ForestSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)
    profile: str = "base"
    seed: int = 0

    # -- derived module configs ----------------------------------------------------------

    def scalogram_config(self) -> ScalogramConfig:
        return ScalogramConfig(**dataclasses.asdict(self.scalogram))

    def gan_hyper(self, seed: Optional[int] = None) -> wccgan.GanHyperparams:
        g = self.gan
        return wccgan.preset(
            g.preset, n_res_blocks=g.n_res_blocks, epochs=g.epochs, patience=g.patience,
            batch_size=g.batch_size, lr=g.lr, gen_channels=g.gen_channels,
            disc_channels=g.disc_channels, net_shape=g.net_shape, val_fraction=g.val_fraction,
            dtype=g.dtype, seed=self.seed if seed is None else seed)

    def forest_params(self, n_trees: Optional[int] = None, seed: Optional[int] = None) -> ForestParams:
        f = self.forest
        return ForestParams(n_trees=n_trees or f.n_trees, max_depth=f.max_depth,
                            min_split_fraction=f.min_split_fraction, seed=self.seed if seed is None else seed,
                            allow_shallow=f.allow_shallow).validate()

    def section_dict(self, *names: str) -> dict:
        return {n: dataclasses.asdict(getattr(self, n)) for n in names}

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    def with_updates(self, **sections) -> "RunConfig":
        """``cfg.with_updates(gan={"enabled": False}, seed=3)``"""
        changes = {}
        for name, value in sections.items():
            if name in SECTIONS:
                changes[name] = dataclasses.replace(getattr(self, name), **value)
            else:
                changes[name] = value
        return dataclasses.replace(self, **changes).validate()

    def validate(self) -> "RunConfig":
        if self.gan.preset not in wccgan.GAN_PRESETS:
            raise ConfigError(f"unknown gan preset {self.gan.preset!r}")
        try:
            self.scalogram_config()
            if self.gan.enabled:
                self.gan_hyper()
            self.forest_params()
        except (ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc
        if self.augment.enabled and not self.augment.pitch_factors:
            raise ConfigError("augment.enabled needs at least one pitch factor")
        if any(not f > 0 or f == 1.0 for f in self.augment.pitch_factors):
            raise ConfigError("pitch factors must be positive and different from 1")
        if not 0 < self.surf.nms <= 1 or self.surf.threshold <= 0 or self.surf.octaves < 1:
            raise ConfigError("surf: need threshold > 0, 0 < nms <= 1, octaves >= 1")
        if self.codebook.k < 1 or self.codebook.max_iters < 1:
            raise ConfigError("codebook: k and max_iters must be positive")
        if not 2 <= self.evaluation.folds <= 5:
            raise ConfigError("evaluation.folds must be within [2, 5]")
        if self.gan.generated_fraction < 0 or self.gan.n_generated < 0:
            raise ConfigError("gan: generated counts must be non-negative")
        if self.gan.max_pair_samples < 0 or 0 < self.gan.max_pair_samples < 2:
            raise ConfigError("gan.max_pair_samples must be 0 or at least 2")
        if self.gan.confusion_trees < 1:
            raise ConfigError("gan.confusion_trees must be positive")
        if len(self.gan.net_shape) != 2 or min(self.gan.net_shape) < 8:
            raise ConfigError("gan.net_shape must be two sizes >= 8")
        if any(n < 1 for n in self.forest.tree_grid):
            raise ConfigError("forest.tree_grid entries must be positive")
        return self


# -- parsing ---------------------------------------------------------------------------------

def _convert(raw: str, default, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = raw.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            if default and isinstance(default[0], str) or not default and where.endswith("classes"):
                return tuple(items)
            if default and isinstance(default[0], int) or where.endswith("tree_grid"):
                return tuple(int(s) for s in items)
            return tuple(float(s) for s in items)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _apply(parser: configparser.ConfigParser, base: dict, origin: str) -> dict:
    out = {k: dict(v) for k, v in base.items()}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{origin}: unknown section [{section}]")
        fields = {f.name for f in dataclasses.fields(SECTIONS[section])}
        for key, raw in parser.items(section):
            if key not in fields:
                raise ConfigError(f"{origin}: unknown key {section}.{key}")
            out[section][key] = _convert(raw, out[section][key], f"{origin}: {section}.{key}")
    return out


def _read(text: str, origin: str) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=origin)
    except configparser.Error as exc:
        raise ConfigError(f"{origin}: {exc}") from None
    return parser


def profile_text(name: str) -> str:
    if name != "base" and name not in PROFILES:
        raise ConfigError(f"unknown profile {name!r}; choose from {', '.join(PROFILES)}")
    return resources.files("escgan").joinpath("profiles", f"{name}.ini").read_text()


def load_config(path=None, profile: Optional[str] = None, seed: int = 0) -> RunConfig:
    """Resolve base -> profile -> user file into a validated :class:`RunConfig`."""
    values = {name: dataclasses.asdict(cls()) for name, cls in SECTIONS.items()}
    values = _apply(_read(profile_text("base"), "base.ini"), values, "base.ini")
    if profile is not None:
        values = _apply(_read(profile_text(profile), f"{profile}.ini"), values, f"{profile}.ini")
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        values = _apply(_read(text, str(path)), values, str(path))
        manifest = values["dataset"]["manifest"]
        if manifest and not Path(manifest).is_absolute():
            values["dataset"]["manifest"] = str((Path(path).parent / manifest).resolve())
    sections = {name: SECTIONS[name](**vals) for name, vals in values.items()}
    return RunConfig(**sections, profile=profile or "base", seed=int(seed)).validate()


def dump_config(cfg: RunConfig) -> str:
    """INI text that reloads to an equal configuration."""
    lines = []
    for name in SECTIONS:
        lines.append(f"[{name}]")
        for key, value in dataclasses.asdict(getattr(cfg, name)).items():
            if isinstance(value, (tuple, list)):
                value = ", ".join(repr(v) if isinstance(v, float) else str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)
