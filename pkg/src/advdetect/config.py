"""Run configuration: one serializable record from which a run is
reproducible. YAML on disk, dataclasses in memory."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from advdetect.detectors import DetectorConfig
from advdetect.genattack import GeneratorConfig
from advdetect.iterattack import IterativeAttackConfig
from advdetect.losses import LossWeights


@dataclass
class DataConfig:
    root: str = "data/shapes"
    train_split: str = "train"
    test_split: str = "test"
    num_images: int = 500
    num_test_images: int = 100
    num_classes: int = 3
    image_size: int = 64
    # color-code the classes (True) or draw every class from a shared
    # palette so only shape distinguishes them (False)
    class_colors: bool = True


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    iterative: IterativeAttackConfig = field(default_factory=IterativeAttackConfig)


def _build(cls, data: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for f in fields(cls):
        if f.name not in data:
            continue
        v = data[f.name]
        if isinstance(v, list):
            v = tuple(v)
        kwargs[f.name] = v
    return cls(**kwargs)


def parse_config(data: dict) -> RunConfig:
    data = dict(data)
    sections = {
        "data": DataConfig,
        "detector": DetectorConfig,
        "generator": GeneratorConfig,
        "weights": LossWeights,
        "iterative": IterativeAttackConfig,
    }
    kwargs = {}
    for key, cls in sections.items():
        if key in data:
            kwargs[key] = _build(cls, data.pop(key) or {})
    top = _build(RunConfig, {k: v for k, v in data.items() if k not in sections})
    for key, value in kwargs.items():
        setattr(top, key, value)
    return top


def config_to_dict(config: RunConfig) -> dict:
    def clean(obj):
        if isinstance(obj, dict):
            return {k: clean(v) for k, v in obj.items()}
        if isinstance(obj, tuple):
            return [clean(v) for v in obj]
        if isinstance(obj, list):
            return [clean(v) for v in obj]
        return obj

    return clean(asdict(config))


def load_config(path: str | Path) -> RunConfig:
    with open(path) as f:
        data = yaml.safe_load(f) or {}
    return parse_config(data)


def save_config(config: RunConfig, path: str | Path) -> None:
    with open(path, "w") as f:
        yaml.safe_dump(config_to_dict(config), f, sort_keys=True)
