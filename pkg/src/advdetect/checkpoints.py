"""Checkpoint persistence.

Detector checkpoints carry weights, construction parameters, and the
backbone token. Generator bundles carry generator/discriminator weights,
the random target features (seed and values), and the training
configuration; loading a bundle reproduces generate outputs bitwise.
"""

from __future__ import annotations

from dataclasses import asdict
from pathlib import Path

import torch

from advdetect.detectors import (
    Backbone,
    ProposalDetector,
    RegressionDetector,
)
from advdetect.genattack import (
    Discriminator,
    Generator,
    GeneratorConfig,
    GeneratorTrainingResult,
)
from advdetect.losses import LossWeights, RandomTargetFeatures


def save_detector(detector, path: str | Path) -> None:
    channels = tuple(conv.out_channels for conv in detector.backbone.convs)
    payload = {
        "family": detector.family,
        "num_classes": detector.num_classes,
        "backbone_token": detector.backbone_token,
        "backbone_channels": list(channels),
        "anchor_size": detector.anchor_size,
        "feature_index": detector.feature_index,
        "state_dict": detector.state_dict(),
    }
    torch.save(payload, path)


def load_detector(path: str | Path, backbone: Backbone | None = None):
    payload = torch.load(path, weights_only=True)
    if backbone is None:
        backbone = Backbone(tuple(payload["backbone_channels"]))
    backbone.token = payload["backbone_token"]
    if payload["family"] == "proposal":
        detector = ProposalDetector(
            backbone,
            payload["num_classes"],
            payload["backbone_token"],
            anchor_size=payload["anchor_size"],
        )
    else:
        detector = RegressionDetector(
            backbone,
            payload["num_classes"],
            payload["backbone_token"],
            anchor_size=payload["anchor_size"],
            feature_index=payload.get("feature_index", 3),
        )
    detector.load_state_dict(payload["state_dict"])
    detector.eval()
    return detector


def save_generator_bundle(result: GeneratorTrainingResult, path: str | Path) -> None:
    payload = {
        "config": asdict(result.config),
        "weights": asdict(result.weights),
        "generator": result.generator.state_dict(),
        "discriminator": result.discriminator.state_dict(),
        "target_seed": result.target_features.seed,
        "targets": [t.clone() for t in result.target_features.targets],
    }
    torch.save(payload, path)


def load_generator_bundle(path: str | Path) -> GeneratorTrainingResult:
    payload = torch.load(path, weights_only=True)
    cfg_dict = dict(payload["config"])
    cfg_dict["betas"] = tuple(cfg_dict["betas"])
    config = GeneratorConfig(**cfg_dict)
    w_dict = dict(payload["weights"])
    w_dict["epsilons"] = tuple(w_dict["epsilons"])
    weights = LossWeights(**w_dict)
    generator = Generator(config)
    generator.load_state_dict(payload["generator"])
    generator.eval()
    discriminator = Discriminator(config.base_channels)
    discriminator.load_state_dict(payload["discriminator"])
    discriminator.eval()
    targets = RandomTargetFeatures(
        seed=payload["target_seed"], targets=list(payload["targets"])
    )
    return GeneratorTrainingResult(generator, discriminator, targets, [], config, weights)
