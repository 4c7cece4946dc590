"""Pipeline configuration: TOML sections mirroring each stage's parameters."""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .patching import PatchSpec, StainMatrix
from .projection import TsneConfig

__all__ = [
    "AnalyticsSection",
    "ConfigError",
    "EmbeddingSection",
    "EvaluationSection",
    "IndexSection",
    "PatchingSection",
    "PipelineConfig",
    "ProjectionSection",
    "load_config",
]


class ConfigError(ValueError):
    pass


_RUIFROK = [list(r) for r in StainMatrix.ruifrok_he().tolist()]


@dataclass(frozen=True)
class PatchingSection:
    patch_size: int = 512
    overlap_min: float = 0.20
    overlap_max: float = 0.80
    overlap_step: float = 0.05
    min_patches_target: int = 32
    cellularity_threshold: float = 0.08
    hematoxylin_od_threshold: float = 0.15
    inside_fraction: float = 0.75
    stain_matrix: list = field(default_factory=lambda: [list(r) for r in _RUIFROK])

    def patch_spec(self) -> PatchSpec:
        kw = {f.name: getattr(self, f.name) for f in dataclasses.fields(PatchSpec)}
        return PatchSpec(**kw)

    def stains(self) -> StainMatrix:
        return StainMatrix(self.stain_matrix)


@dataclass(frozen=True)
class EmbeddingSection:
    base_url: str = "http://127.0.0.1:8000"
    timeout: float = 30.0
    max_retries: int = 2
    batch_size: int = 16
    max_in_flight: int = 1


@dataclass(frozen=True)
class IndexSection:
    normalize: bool = False


@dataclass(frozen=True)
class EvaluationSection:
    n_values: list = field(default_factory=lambda: [1, 3, 5, 7])


@dataclass(frozen=True)
class AnalyticsSection:
    pca_k: int = 50


@dataclass(frozen=True)
class ProjectionSection:
    perplexity: float = 30.0
    iterations: int = 1000
    early_exaggeration: float = 12.0
    exaggeration_iters: int = 250
    learning_rate: float = 200.0
    momentum: float = 0.5
    final_momentum: float = 0.8
    momentum_switch_iter: int = 250
    seed: int = 0
    init: str = "pca"
    max_points: int = 5000
    variant: str = "both"
    pca_k: int = 50

    def tsne_config(self) -> TsneConfig:
        kw = {f.name: getattr(self, f.name) for f in dataclasses.fields(TsneConfig)}
        return TsneConfig(**kw)


_SECTIONS = {
    "patching": PatchingSection,
    "embedding": EmbeddingSection,
    "index": IndexSection,
    "evaluation": EvaluationSection,
    "analytics": AnalyticsSection,
    "projection": ProjectionSection,
}


def _coerce(section: str, cls, values: Mapping[str, Any]):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    kw = {}
    for name, value in values.items():
        default = getattr(cls(), name)
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"[{section}] {name} must be a boolean")
        elif isinstance(default, int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"[{section}] {name} must be an integer")
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"[{section}] {name} must be a number")
            value = float(value)
        elif isinstance(default, str):
            if not isinstance(value, str):
                raise ConfigError(f"[{section}] {name} must be a string")
        elif isinstance(default, list):
            if not isinstance(value, list):
                raise ConfigError(f"[{section}] {name} must be an array")
        kw[name] = value
    return cls(**kw)


@dataclass(frozen=True)
class PipelineConfig:
    patching: PatchingSection = field(default_factory=PatchingSection)
    embedding: EmbeddingSection = field(default_factory=EmbeddingSection)
    index: IndexSection = field(default_factory=IndexSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)
    analytics: AnalyticsSection = field(default_factory=AnalyticsSection)
    projection: ProjectionSection = field(default_factory=ProjectionSection)

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "PipelineConfig":
        unknown = sorted(set(raw) - set(_SECTIONS))
        if unknown:
            raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
        kw = {}
        for name, section_cls in _SECTIONS.items():
            values = raw.get(name, {})
            if not isinstance(values, Mapping):
                raise ConfigError(f"[{name}] must be a table")
            kw[name] = _coerce(name, section_cls, values)
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        try:
            self.patching.patch_spec()
            self.patching.stains()
            self.projection.tsne_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.projection.variant not in ("full", "pca", "both"):
            raise ConfigError("[projection] variant must be 'full', 'pca' or 'both'")
        if not self.evaluation.n_values or any(
            not isinstance(n, int) or n < 1 for n in self.evaluation.n_values
        ):
            raise ConfigError("[evaluation] n_values must be positive integers")

    def override(self, section: str, **values) -> "PipelineConfig":
        """Copy with some keys replaced (None values are ignored)."""
        values = {k: v for k, v in values.items() if v is not None}
        if not values:
            return self
        current = dataclasses.asdict(getattr(self, section))
        current.update(values)
        new = dataclasses.replace(self, **{section: _coerce(section, _SECTIONS[section], current)})
        new.validate()
        return new

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in _SECTIONS}

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(self.dumps())
        return path


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return PipelineConfig.from_dict(raw)
