"""Pipeline configuration: one file (JSON or YAML) plus command-line overrides."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .strain import StrainConfig


@dataclass(frozen=True)
class ClassifierConfig:
    kind: str = "mock"  # mock | external
    confidence: float = 1.0
    command: tuple[str, ...] = ()
    timeout: float = 120.0


@dataclass(frozen=True)
class SegmentationConfig:
    kind: str = "oracle"  # oracle | external
    command: tuple[str, ...] = ()
    timeout: float = 120.0


@dataclass(frozen=True)
class MaskConfig:
    sample_count: int = 10
    static_fraction: float = 0.8


@dataclass(frozen=True)
class QuantifyConfig:
    window_fraction: float = 0.9  # of one beat
    step_fraction: float = 0.5
    la_lv_min_ratio: float = 0.30
    video_percentile: dict = field(default_factory=dict)  # overrides, e.g. {"lvedv": 90}
    study_percentile: dict = field(default_factory=dict)


@dataclass(frozen=True)
class DiseaseConfig:
    kind: str = "mock"  # mock | external | none
    rounds: int = 4
    gain: float = 10.0
    center: float = 0.0
    jitter: float = 0.0
    command: tuple[str, ...] = ()
    timeout: float = 120.0


@dataclass(frozen=True)
class StatsConfig:
    seed: int = 0
    iterations: int = 10_000
    trajectory_threshold: float = 16.0  # percent GLS
    n_videos_cap: int = 15


_SECTIONS = {
    "classifier": ClassifierConfig,
    "segmentation": SegmentationConfig,
    "mask": MaskConfig,
    "quantify": QuantifyConfig,
    "strain": StrainConfig,
    "disease": DiseaseConfig,
    "stats": StatsConfig,
}
_TUPLE_FIELDS = {"command", "position_range"}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    segmentation: SegmentationConfig = field(default_factory=SegmentationConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    quantify: QuantifyConfig = field(default_factory=QuantifyConfig)
    strain: StrainConfig = field(default_factory=StrainConfig)
    disease: DiseaseConfig = field(default_factory=DiseaseConfig)
    stats: StatsConfig = field(default_factory=StatsConfig)
    jobs: int = 1

    def __post_init__(self):
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        if self.classifier.kind not in ("mock", "external"):
            raise ConfigError(f"unknown classifier kind {self.classifier.kind!r}")
        if not 0 < self.classifier.confidence <= 1:
            raise ConfigError("classifier confidence must be in (0, 1]")
        if self.segmentation.kind not in ("oracle", "external"):
            raise ConfigError(f"unknown segmentation kind {self.segmentation.kind!r}")
        if self.disease.kind not in ("mock", "external", "none"):
            raise ConfigError(f"unknown disease model kind {self.disease.kind!r}")
        if self.disease.rounds < 1:
            raise ConfigError("disease rounds must be >= 1")
        if not 0 < self.quantify.window_fraction <= 2 or not 0 < self.quantify.step_fraction <= 2:
            raise ConfigError("window and step fractions must be in (0, 2]")
        if self.mask.sample_count < 2 or not 0 < self.mask.static_fraction <= 1:
            raise ConfigError("mask needs sample_count >= 2 and static_fraction in (0, 1]")
        if self.stats.iterations < 1 or self.stats.n_videos_cap < 1:
            raise ConfigError("stats iterations and n_videos_cap must be positive")

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        kwargs = {}
        for key, value in (data or {}).items():
            if key == "jobs":
                kwargs["jobs"] = int(value)
                continue
            if key not in _SECTIONS:
                raise ConfigError(f"unknown config section {key!r}")
            kwargs[key] = _build(_SECTIONS[key], value)
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        path = Path(path)
        text = path.read_text(encoding="utf-8")
        if path.suffix.lower() in (".yaml", ".yml"):
            import yaml

            data = yaml.safe_load(text) or {}
        else:
            data = json.loads(text)
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        out = {name: asdict(getattr(self, name)) for name in _SECTIONS}
        out["jobs"] = self.jobs
        for section in out.values():
            if isinstance(section, dict):
                for k in _TUPLE_FIELDS & section.keys():
                    section[k] = list(section[k])
        return out

    def with_overrides(self, seed: int | None = None, jobs: int | None = None) -> "PipelineConfig":
        cfg = self
        if seed is not None:
            cfg = replace(cfg, stats=replace(cfg.stats, seed=seed))
        if jobs is not None:
            cfg = replace(cfg, jobs=jobs)
        return cfg


def _build(cls, value: dict):
    if not isinstance(value, dict):
        raise ConfigError(f"section {cls.__name__} must be a mapping")
    names = {f.name for f in fields(cls)}
    unknown = set(value) - names
    if unknown:
        raise ConfigError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    clean = {k: tuple(v) if k in _TUPLE_FIELDS and v is not None else v for k, v in value.items()}
    try:
        return cls(**clean)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from exc
