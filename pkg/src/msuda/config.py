"""Pipeline configuration: one nested key-value tree, echoed into every
stage manifest.

The run id hashes the scientific settings plus the seed; filesystem paths
are excluded so the same experiment reproduces bit-identically in any
work directory.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

from .volume import PreprocessConfig
from .phantom import PhantomConfig, SiteStyle, StructureParams
from .synthesis import GeneratorConfig
from .segmentation import SegConfig, SegMemberSpec
from .oversample import HardSampleRule
from .selftrain import MODE_BILATERAL_ANY, MODE_PER_SIDE


class ConfigError(ValueError):
    """Configuration file violates the expected schema."""


@dataclass
class PathsConfig:
    work_dir: str = "work"
    data_root: str | None = None


@dataclass
class OversampleConfig:
    n_codes: int = 3
    scheme: str = "convex"
    code_set_seeds: tuple = (101,)

    def __post_init__(self):
        self.code_set_seeds = tuple(int(s) for s in self.code_set_seeds)
        if self.n_codes < 1 or not self.code_set_seeds:
            raise ConfigError("oversample needs n_codes >= 1 and a code set seed")


@dataclass
class SelfTrainConfig:
    rounds: int = 2
    filter_mode: str = MODE_BILATERAL_ANY

    def __post_init__(self):
        if self.rounds < 0:
            raise ConfigError("self-training rounds must be >= 0")
        if self.filter_mode not in (MODE_BILATERAL_ANY, MODE_PER_SIDE):
            raise ConfigError(f"unknown filter mode {self.filter_mode!r}")


@dataclass
class PipelineConfig:
    seed: int = 0
    train_on: str = "synthetic"          # "source" = no-adaptation baseline
    predict_split: str = "target-val"
    predict_model_stage: str = "auto"    # auto | train-seg | self-train
    save_probabilities: bool = False
    paths: PathsConfig = field(default_factory=PathsConfig)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    synthesis: GeneratorConfig = field(default_factory=GeneratorConfig)
    segmentation: SegConfig = field(default_factory=SegConfig)
    hard_rule: HardSampleRule = field(default_factory=HardSampleRule)
    oversample: OversampleConfig = field(default_factory=OversampleConfig)
    self_training: SelfTrainConfig = field(default_factory=SelfTrainConfig)

    def __post_init__(self):
        if self.train_on not in ("synthetic", "source"):
            raise ConfigError(f"train_on must be synthetic|source, got {self.train_on!r}")
        if self.predict_model_stage not in ("auto", "train-seg", "self-train"):
            raise ConfigError(
                f"predict_model_stage must be auto|train-seg|self-train, "
                f"got {self.predict_model_stage!r}")

    def to_dict(self) -> dict:
        return _to_jsonable(asdict(self))

    def run_id(self) -> str:
        payload = self.to_dict()
        payload.pop("paths", None)
        canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:12]


def desk_config(**overrides) -> PipelineConfig:
    """The scaled-down configuration used for CPU desk runs."""
    cfg = PipelineConfig(
        phantom=PhantomConfig(n_source=6, n_target_per_site=2,
                              n_target_val_per_site=2, hard_fraction=0.3),
        preprocess=PreprocessConfig(target_spacing=(1.0, 1.0, 1.0),
                                    crop_shape=(64, 48, 16)),
        synthesis=GeneratorConfig.desk(),
        segmentation=SegConfig(epochs=25, patch_shape=(64, 48, 8),
                               channels=(6, 12, 24), ensemble_size=3,
                               steps_per_epoch=8, val_interval=2,
                               max_val_cases=2),
    )
    return _apply_overrides(cfg, overrides) if overrides else cfg


def _to_jsonable(obj):
    if isinstance(obj, dict):
        return {k: _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    if isinstance(obj, Path):
        return str(obj)
    return obj


_SECTION_TYPES = {
    "paths": PathsConfig,
    "phantom": PhantomConfig,
    "preprocess": PreprocessConfig,
    "synthesis": GeneratorConfig,
    "segmentation": SegConfig,
    "hard_rule": HardSampleRule,
    "oversample": OversampleConfig,
    "self_training": SelfTrainConfig,
}


def _build_section(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"section {path!r} must be a mapping, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown keys in {path!r}: {sorted(unknown)}")
    kwargs = dict(data)
    try:
        if cls is PhantomConfig and kwargs.get("site_styles") is not None:
            kwargs["site_styles"] = [SiteStyle(**s) for s in kwargs["site_styles"]]
        if cls is PhantomConfig and isinstance(kwargs.get("structure"), dict):
            kwargs["structure"] = StructureParams(**kwargs["structure"])
        if cls is SegConfig and kwargs.get("members") is not None:
            kwargs["members"] = [SegMemberSpec(**m) for m in kwargs["members"]]
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad section {path!r}: {exc}") from exc


def config_from_dict(data: dict) -> PipelineConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    top_fields = {f.name for f in dataclasses.fields(PipelineConfig)}
    unknown = set(data) - top_fields
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        if key in _SECTION_TYPES:
            kwargs[key] = _build_section(_SECTION_TYPES[key], value, key)
        else:
            kwargs[key] = value
    try:
        return PipelineConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(data)


def save_config(cfg: PipelineConfig, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")


def parse_override(text: str):
    """KEY=VALUE with a dotted key; the value parses as JSON, else a string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not KEY=VALUE")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def apply_overrides(cfg: PipelineConfig, overrides) -> PipelineConfig:
    """Apply dotted-key overrides, re-validating the result."""
    data = cfg.to_dict()
    for key, value in overrides:
        parts = key.split(".")
        node = data
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ConfigError(f"override path {key!r} does not exist")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"override path {key!r} does not exist")
        node[parts[-1]] = value
    return config_from_dict(data)


def _apply_overrides(cfg: PipelineConfig, overrides: dict) -> PipelineConfig:
    return apply_overrides(cfg, list(overrides.items()))
