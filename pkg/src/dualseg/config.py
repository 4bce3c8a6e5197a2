"""Run configuration: JSON with full defaulting, strict key checking, and
dotted-path overrides.

Every artifact-producing command persists its fully resolved configuration
(plus seed) as run.json, which is sufficient to reproduce the run bitwise.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .network import NetConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    """Unknown key, malformed value, or unusable combination."""


@dataclass
class DatasetConfig:
    n_volumes: int = 20
    extent: int = 32
    n_blobs: int = 3
    noise_sigma: float = 0.55
    noise_smooth: float = 1.8
    intensity_fg: float = 1.0
    intensity_bg: float = 0.0
    # per-volume appearance diversity: realized contrast multiplies
    # intensity_fg - intensity_bg by a uniform draw from contrast_range, and
    # the lobe count is drawn from blob_range (inclusive). Two labeled
    # volumes cannot cover this variability, which is what leaves headroom
    # for the unlabeled data to close.
    contrast_range: tuple[float, float] = (0.3, 1.7)
    blob_range: tuple[int, int] = (1, 8)
    blob_scale: float = 1.0
    seed: int = 7

    def __post_init__(self):
        if self.n_volumes < 2:
            raise ConfigError(f"need at least 2 volumes, got {self.n_volumes}")
        self.contrast_range = tuple(float(c) for c in self.contrast_range)
        self.blob_range = tuple(int(b) for b in self.blob_range)
        if len(self.contrast_range) != 2 or self.contrast_range[0] > self.contrast_range[1] \
                or self.contrast_range[0] <= 0:
            raise ConfigError(f"invalid contrast_range {self.contrast_range}")
        if len(self.blob_range) != 2 or not 1 <= self.blob_range[0] <= self.blob_range[1]:
            raise ConfigError(f"invalid blob_range {self.blob_range}")


@dataclass
class EvalConfig:
    window: tuple[int, int, int] = (16, 16, 16)
    stride: tuple[int, int, int] = (8, 8, 8)
    threshold: float = 0.5
    report_mm: bool = False  # default: surface distances in voxel units

    def __post_init__(self):
        self.window = tuple(int(w) for w in self.window)
        self.stride = tuple(int(s) for s in self.stride)
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must lie in (0, 1), got {self.threshold}")


@dataclass
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    student: NetConfig = field(default_factory=lambda: NetConfig(residual=False))
    teacher: NetConfig = field(default_factory=lambda: NetConfig(residual=True))
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    folds: int = 5
    labeled_fraction: float = 0.1
    split_seed: int = 0

    def __post_init__(self):
        if self.folds < 2:
            raise ConfigError(f"need at least 2 folds, got {self.folds}")
        if not 0.0 < self.labeled_fraction <= 1.0:
            raise ConfigError(f"labeled_fraction must lie in (0, 1], got {self.labeled_fraction}")


_SECTION_TYPES = {
    "dataset": DatasetConfig,
    "student": NetConfig,
    "teacher": NetConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}


def _build_section(cls, values: dict, path: str):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown config key(s) {sorted(unknown)} under '{path}' "
                          f"(known: {sorted(known)})")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid values under '{path}': {exc}")


def config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be an object, got {type(raw).__name__}")
    top_known = {f.name for f in fields(RunConfig)}
    unknown = set(raw) - top_known
    if unknown:
        raise ConfigError(f"unknown top-level config key(s) {sorted(unknown)} "
                          f"(known: {sorted(top_known)})")
    kwargs = {}
    for key, value in raw.items():
        if key in _SECTION_TYPES:
            if not isinstance(value, dict):
                raise ConfigError(f"section '{key}' must be an object")
            kwargs[key] = _build_section(_SECTION_TYPES[key], value, key)
        else:
            kwargs[key] = value
    try:
        return RunConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc))


def load_config(path: Path | str | None) -> RunConfig:
    """Defaults when path is None; otherwise strict-parse the JSON file."""
    if path is None:
        return RunConfig()
    raw = json.loads(Path(path).read_text())
    return config_from_dict(raw)


def config_to_dict(cfg: RunConfig) -> dict:
    # canonicalize through JSON so tuples come back as lists
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


def _parse_scalar(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text  # bare strings like paper-literal


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply key=value pairs with dotted paths, e.g. train.total_iters=50."""
    raw = config_to_dict(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, _, value = item.partition("=")
        parts = key.strip().split(".")
        node = raw
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ConfigError(f"unknown config key {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = _parse_scalar(value.strip())
    return config_from_dict(raw)
