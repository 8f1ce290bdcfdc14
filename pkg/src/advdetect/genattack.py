"""One-pass generative attack: an encoder-decoder generator trained inside a
GAN game against a frozen proposal-based victim detector.

The generator emits a bounded residual perturbation; training combines the
GAN loss, an L2 similarity loss, the proposal misclassification loss, and
the multi-scale attention feature loss into one objective. At attack time a
single forward pass produces the adversarial image.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from advdetect.attention import attention_per_layer
from advdetect.boxes import BoundingBox, FrameSequence, Image, Proposal
from advdetect.detectors import ProposalDetector
from advdetect.losses import (
    LossReport,
    LossWeights,
    RandomTargetFeatures,
    assign_adversarial_labels,
    attention_feature_loss,
    dag_class_loss,
    gan_discriminator_loss,
    gan_generator_loss,
    l2_similarity,
    select_attack_proposals,
)
from advdetect.tensors import seed_everything, to_image, to_tensor


@dataclass
class GeneratorConfig:
    """Architecture and optimization settings for the adversarial generator."""

    scale: str = "toy"  # "toy" or "full" (deeper bottleneck)
    epochs: int = 6
    lr: float = 2e-4
    betas: tuple[float, float] = (0.5, 0.999)
    batch_size: int = 8
    seed: int = 0
    base_channels: int = 16
    linf_cap: float | None = 0.1  # residual bound in [0,1] units; None disables
    proposal_threshold: float = 0.7
    attention_top_k: int = 300
    target_seed: int = 7
    target_scale: float = 1.0  # amplitude of the random target feature maps
    clean_proposals: bool = False  # take proposals/attention from the clean image

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.scale not in ("toy", "full"):
            raise ValueError(f"unknown scale {self.scale!r}")


@dataclass
class AttackArtifacts:
    """Output of one attack on one image."""

    adversarial: Image
    perturbation: np.ndarray
    wall_time: float
    mean_l2: float
    linf: float


class _ConvBlock(nn.Module):
    def __init__(self, in_ch, out_ch, stride=1):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1)
        self.norm = nn.InstanceNorm2d(out_ch, affine=True)

    def forward(self, x):
        return F.relu(self.norm(self.conv(x)))


class _ResBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.a = _ConvBlock(ch, ch)
        self.conv = nn.Conv2d(ch, ch, 3, padding=1)
        self.norm = nn.InstanceNorm2d(ch, affine=True)

    def forward(self, x):
        return F.relu(x + self.norm(self.conv(self.a(x))))


class _UpBlock(nn.Module):
    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.block = _ConvBlock(in_ch, out_ch)

    def forward(self, x):
        return self.block(F.interpolate(x, scale_factor=2, mode="nearest"))


class Generator(nn.Module):
    """Encoder (3 strided blocks) - residual bottleneck - decoder (3
    upsampling blocks), emitting a tanh-bounded residual perturbation."""

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        c = config.base_channels
        n_res = 2 if config.scale == "toy" else 6
        self.encoder = nn.Sequential(
            _ConvBlock(3, c),
            _ConvBlock(c, 2 * c, stride=2),
            _ConvBlock(2 * c, 4 * c, stride=2),
        )
        self.bottleneck = nn.Sequential(*[_ResBlock(4 * c) for _ in range(n_res)])
        self.decoder = nn.Sequential(
            _UpBlock(4 * c, 2 * c),
            _UpBlock(2 * c, c),
            _ConvBlock(c, c),
        )
        self.out_conv = nn.Conv2d(c, 3, 3, padding=1)
        self.linf_cap = config.linf_cap

    def zero_perturbation_init(self) -> "Generator":
        """Zero the output layer so the generator initially emits delta = 0."""
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)
        return self

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        residual = self.out_conv(self.decoder(self.bottleneck(self.encoder(x))))
        if self.linf_cap is not None:
            residual = self.linf_cap * torch.tanh(residual)
        return (x + residual).clamp(0.0, 1.0)


class Discriminator(nn.Module):
    """Four strided conv layers pooled to one real/fake probability."""

    def __init__(self, base_channels: int = 16):
        super().__init__()
        c = base_channels
        self.features = nn.Sequential(
            nn.Conv2d(3, c, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(c, 2 * c, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(2 * c, 4 * c, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(4 * c, 1, 4, stride=2, padding=1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.features(x).mean(dim=(1, 2, 3)))


def generate(generator: Generator, image: Image) -> AttackArtifacts:
    """Single forward pass producing the adversarial image plus stats."""
    t0 = time.perf_counter()
    generator.eval()
    with torch.no_grad():
        adv_t = generator(to_tensor(image)[None])[0]
    wall = time.perf_counter() - t0
    adv = to_image(adv_t, image_id=image.id)
    delta = adv.pixels - image.pixels
    per_pixel = np.sqrt((delta.astype(np.float64) ** 2).sum(axis=0))
    return AttackArtifacts(
        adversarial=adv,
        perturbation=delta,
        wall_time=wall,
        mean_l2=float(per_pixel.mean()),
        linf=float(np.abs(delta).max()),
    )


def generate_video(generator: Generator, frames: FrameSequence) -> tuple[FrameSequence, float]:
    """Per-frame attack over a sequence; returns the adversarial sequence and
    the total generation wall-time."""
    if len(frames) == 0:
        raise ValueError("empty frame sequence")
    t0 = time.perf_counter()
    adv_frames = tuple(generate(generator, f).adversarial for f in frames.frames)
    total = time.perf_counter() - t0
    return FrameSequence(adv_frames, fps=frames.fps), total


class NonFiniteLossError(RuntimeError):
    def __init__(self, report: LossReport):
        super().__init__(f"non-finite loss at training step: {report.as_dict()}")
        self.report = report


@dataclass
class GeneratorTrainingResult:
    generator: Generator
    discriminator: Discriminator
    target_features: RandomTargetFeatures
    log: list[LossReport]
    config: GeneratorConfig
    weights: LossWeights


def _detector_weight_digest(detector: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(detector.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def _label_rng(seed: int, epoch: int, image_id: str) -> np.random.Generator:
    # adversarial labels are fixed per image within an epoch
    digest = hashlib.sha256(f"{seed}:{epoch}:{image_id}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def train_generator(
    victim: ProposalDetector,
    train_set,
    weights: LossWeights | None = None,
    config: GeneratorConfig | None = None,
    log_path=None,
    checkpoint_dir=None,
) -> GeneratorTrainingResult:
    """Jointly train generator and discriminator against a frozen
    proposal-based victim.

    Each batch takes one discriminator step on its GAN loss, then one
    generator step on the full weighted objective. The victim's weights are
    never updated. With checkpoint_dir set, a bundle is saved after every
    epoch.
    """
    if not isinstance(victim, ProposalDetector):
        raise TypeError("training requires a proposal-based victim detector")
    weights = weights or LossWeights()
    config = config or GeneratorConfig()
    seed_everything(config.seed)

    generator = Generator(config)
    discriminator = Discriminator(config.base_channels)
    g_opt = torch.optim.Adam(generator.parameters(), lr=config.lr, betas=config.betas)
    d_opt = torch.optim.Adam(discriminator.parameters(), lr=config.lr, betas=config.betas)

    victim.eval()
    for p in victim.parameters():
        p.requires_grad_(False)
    victim_digest = _detector_weight_digest(victim)

    probe = train_set.entries[0].load()
    h, w = probe.height, probe.width
    with torch.no_grad():
        fset = victim.extract_features(probe)
    target_features = RandomTargetFeatures.create(
        [tuple(l.shape) for l in fset.attack_layers],
        config.target_seed,
        scale=config.target_scale,
    )
    attack_strides = fset.attack_strides

    log: list[LossReport] = []
    entries = list(train_set.entries)
    rng = np.random.default_rng(config.seed)
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(entries))
        for start in range(0, len(entries), config.batch_size):
            batch = [entries[i] for i in order[start : start + config.batch_size]]
            clean = torch.stack([to_tensor(e.load()) for e in batch])

            # discriminator step
            adv = generator(clean)
            d_loss = gan_discriminator_loss(discriminator(clean), discriminator(adv.detach()))
            d_opt.zero_grad()
            d_loss.backward()
            d_opt.step()

            # generator step on the full objective
            adv = generator(clean)
            g_gan = gan_generator_loss(discriminator(adv))
            l2 = l2_similarity(clean, adv)

            feats = victim.extract_features(adv)
            finals = feats.final
            if config.clean_proposals:
                # attack the regions the victim finds on the unperturbed input
                with torch.no_grad():
                    proposal_finals = victim.backbone(clean)[-1]
            else:
                proposal_finals = finals
            cls_terms = []
            x_m = [[] for _ in attack_strides]
            a_m = [[] for _ in attack_strides]
            for i, entry in enumerate(batch):
                boxes_t, scores_t = victim.propose_tensors(proposal_finals[i], (h, w))
                plist = []
                for b, s in zip(boxes_t.tolist(), scores_t.tolist()):
                    try:
                        plist.append(Proposal(BoundingBox(*b), float(min(max(s, 0.0), 1.0))))
                    except ValueError:
                        continue
                active = select_attack_proposals(plist, config.proposal_threshold)
                if active:
                    labeled = assign_adversarial_labels(
                        active,
                        list(entry.objects),
                        victim.total_classes,
                        _label_rng(config.seed, epoch, entry.image_id),
                    )
                    act_boxes = torch.tensor(
                        [p.box.as_tuple() for p in labeled], dtype=finals.dtype
                    )
                    logits = victim.classify_rois(finals[i : i + 1], act_boxes)
                    true_t = torch.tensor([p.true_label for p in labeled])
                    adv_t = torch.tensor([p.adv_label for p in labeled])
                    # as in the iterative baseline, only proposals the victim
                    # still classifies correctly stay in the active set; the
                    # class term saturates once every region is fooled
                    still = logits.detach().argmax(dim=1) == true_t
                    if still.any():
                        cls_terms.append(
                            dag_class_loss(
                                logits[still],
                                true_t[still].tolist(),
                                adv_t[still].tolist(),
                            )
                        )
                att = attention_per_layer(
                    plist, (h, w), attack_strides, top_k=config.attention_top_k
                )
                for m in range(len(attack_strides)):
                    x_m[m].append(feats.attack_layers[m][i])
                    a_m[m].append(torch.from_numpy(att[m]).to(finals.dtype))

            cls_loss = (
                torch.stack(cls_terms).sum() / len(batch)
                if cls_terms
                else clean.new_zeros(())
            )
            feature_terms = [
                attention_feature_loss(
                    [torch.stack(x_m[m])],
                    [target_features.targets[m][None].expand(len(batch), -1, -1, -1)],
                    [torch.stack(a_m[m])],
                )
                for m in range(len(attack_strides))
            ]
            total = g_gan + weights.alpha * l2 + weights.beta * cls_loss
            for eps, term in zip(weights.epsilons, feature_terms):
                total = total + eps * term
            feature_vals = tuple(float(t.detach()) for t in feature_terms)
            report = LossReport(
                gan_g=float(g_gan.detach()),
                gan_d=float(d_loss.detach()),
                l2=float(l2.detach()),
                dag_class=float(cls_loss.detach()),
                feature=feature_vals,
                total=float(g_gan.detach())
                + weights.alpha * float(l2.detach())
                + weights.beta * float(cls_loss.detach())
                + sum(e * f for e, f in zip(weights.epsilons, feature_vals)),
            )
            if not np.isfinite(report.total):
                raise NonFiniteLossError(report)
            g_opt.zero_grad()
            total.backward()
            g_opt.step()
            log.append(report)
            step += 1
        if checkpoint_dir is not None:
            from pathlib import Path

            from advdetect.checkpoints import save_generator_bundle

            Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
            snapshot = GeneratorTrainingResult(
                generator, discriminator, target_features, log, config, weights
            )
            save_generator_bundle(snapshot, Path(checkpoint_dir) / f"epoch_{epoch + 1:03d}.pt")

    if _detector_weight_digest(victim) != victim_digest:
        raise RuntimeError("victim detector weights changed during attack training")
    generator.eval()
    discriminator.eval()
    if log_path is not None:
        write_training_log(log, log_path)
    return GeneratorTrainingResult(
        generator, discriminator, target_features, log, config, weights
    )


def train_ablation(
    victim: ProposalDetector,
    train_set,
    weights: LossWeights | None = None,
    config: GeneratorConfig | None = None,
    log_path=None,
) -> GeneratorTrainingResult:
    """Class-loss-only variant: the feature loss weights are forced to 0."""
    weights = weights or LossWeights()
    weights = replace(weights, epsilons=tuple(0.0 for _ in weights.epsilons))
    return train_generator(victim, train_set, weights, config, log_path)


def write_training_log(log: list[LossReport], path) -> None:
    import json

    with open(path, "w") as f:
        f.write(json.dumps({"header": "loss-per-step", "fields": list(LossReport.__annotations__)}) + "\n")
        for i, rec in enumerate(log):
            f.write(json.dumps({"step": i, **rec.as_dict()}) + "\n")
