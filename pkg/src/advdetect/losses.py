"""Loss terms for training the adversarial generator.

Four terms combine into the full objective: the GAN real/fake game, an L2
similarity penalty keeping adversarial images close to clean ones, a
proposal misclassification (class margin) loss, and a multi-scale attention
feature loss pushing attended backbone activations toward fixed random
targets.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from advdetect.boxes import GroundTruthObject, Proposal, iou

_PROB_EPS = 1e-7

PROPOSAL_SCORE_THRESHOLD = 0.7


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    if hasattr(x, "pixels"):
        return torch.from_numpy(np.ascontiguousarray(x.pixels))
    return torch.as_tensor(x)


def _check_probs(t: torch.Tensor, name: str) -> torch.Tensor:
    if torch.any(t < 0) or torch.any(t > 1):
        raise ValueError(f"{name} outside [0, 1]")
    return t.clamp(_PROB_EPS, 1 - _PROB_EPS)


def gan_discriminator_loss(d_real, d_fake) -> torch.Tensor:
    """-[log D(real) + log(1 - D(fake))], batch-averaged.

    Inputs are post-sigmoid probabilities.
    """
    d_real = _check_probs(_as_tensor(d_real), "d_real")
    d_fake = _check_probs(_as_tensor(d_fake), "d_fake")
    return -(torch.log(d_real).mean() + torch.log(1 - d_fake).mean())


def gan_generator_loss(d_fake) -> torch.Tensor:
    """Non-saturating generator loss -log D(fake), batch-averaged."""
    d_fake = _check_probs(_as_tensor(d_fake), "d_fake")
    return -torch.log(d_fake).mean()


def l2_similarity(clean, adv, squared: bool = False) -> torch.Tensor:
    """Euclidean norm of the flattened pixel difference, batch-averaged.

    Accepts (C, H, W) or (B, C, H, W) tensors/arrays or Image objects.
    """
    c = _as_tensor(clean)
    a = _as_tensor(adv)
    if c.shape != a.shape:
        raise ValueError(f"shape mismatch: {tuple(c.shape)} vs {tuple(a.shape)}")
    if c.dim() == 3:
        c, a = c[None], a[None]
    diff = (c - a).flatten(1)
    norms = diff.square().sum(dim=1)
    if not squared:
        norms = torch.sqrt(norms + 1e-12) if norms.requires_grad else torch.sqrt(norms)
    return norms.mean()


def select_attack_proposals(
    proposals: list[Proposal], threshold: float = PROPOSAL_SCORE_THRESHOLD
) -> list[Proposal]:
    """The active set: proposals with score >= threshold, order preserved."""
    return [p for p in proposals if p.score >= threshold]


def match_true_labels(
    proposals: list[Proposal],
    ground_truths: list[GroundTruthObject],
    background_label: int,
    iou_threshold: float = 0.5,
) -> list[int]:
    """Label each proposal with its best-overlap ground truth (IOU >= 0.5),
    else the background class."""
    labels = []
    for p in proposals:
        best, best_iou = background_label, 0.0
        for gt in ground_truths:
            v = iou(p.box, gt.box)
            if v > best_iou:
                best, best_iou = gt.label, v
        labels.append(best if best_iou >= iou_threshold else background_label)
    return labels


def assign_adversarial_labels(
    proposals: list[Proposal],
    ground_truths: list[GroundTruthObject],
    num_classes: int,
    rng: np.random.Generator | int,
    include_background: bool = True,
    background_label: int | None = None,
) -> list[Proposal]:
    """Attach (true label, adversarial label) pairs to proposals.

    num_classes counts all detector classes including background (the last
    index). The adversarial label is sampled uniformly from classes other
    than the true label; deterministic given the rng/seed.
    """
    if num_classes < 2:
        raise ValueError("need at least 2 classes to pick a wrong label")
    if isinstance(rng, int):
        rng = np.random.default_rng(rng)
    if background_label is None:
        background_label = num_classes - 1
    true_labels = match_true_labels(proposals, ground_truths, background_label)
    out = []
    for p, l_n in zip(proposals, true_labels):
        candidates = [
            c
            for c in range(num_classes)
            if c != l_n and (include_background or c != background_label)
        ]
        adv = int(candidates[rng.integers(0, len(candidates))])
        out.append(Proposal(p.box, p.score, true_label=l_n, adv_label=adv))
    return out


def dag_class_loss(
    score_vectors: torch.Tensor,
    true_labels: list[int] | torch.Tensor,
    adv_labels: list[int] | torch.Tensor,
) -> torch.Tensor:
    """Sum over proposals of (true-class logit - adversarial-class logit).

    Minimizing drives true-class logits down and adversarial-class logits
    up. An empty proposal set contributes 0 (the attack already succeeded).
    """
    if len(score_vectors) == 0:
        return torch.zeros((), dtype=torch.get_default_dtype())
    t = torch.as_tensor(true_labels, dtype=torch.long)
    a = torch.as_tensor(adv_labels, dtype=torch.long)
    idx = torch.arange(len(score_vectors))
    return (score_vectors[idx, t] - score_vectors[idx, a]).sum()


def attention_feature_loss(
    feature_maps: list[torch.Tensor],
    random_targets: list[torch.Tensor],
    attention: list[torch.Tensor],
    squared: bool = False,
) -> torch.Tensor:
    """Sum over layers of ||A_m o (X_m - R_m)||_2.

    Attention grids are spatial-only and broadcast across channels. Each
    layer's norm is over its flattened weighted difference; batched inputs
    (B, C, h, w) with attention (B, h, w) average the per-sample norms.
    """
    if not (len(feature_maps) == len(random_targets) == len(attention)):
        raise ValueError("per-layer list lengths differ")
    total = None
    for x, r, a in zip(feature_maps, random_targets, attention):
        x = _as_tensor(x)
        r = _as_tensor(r).to(x.dtype)
        a = _as_tensor(a).to(x.dtype)
        batched = x.dim() == 4
        if not batched:
            x, a = x[None], a[None]
            if r.dim() == 3:
                r = r[None]
        if r.dim() == 3:
            r = r[None].expand_as(x)
        if x.shape[-2:] != a.shape[-2:] or x.shape != r.shape:
            raise ValueError(
                f"layer shape mismatch: X {tuple(x.shape)}, R {tuple(r.shape)}, "
                f"A {tuple(a.shape)}"
            )
        weighted = a[:, None] * (x - r)
        sq = weighted.flatten(1).square().sum(dim=1)
        term = sq.mean() if squared else torch.sqrt(sq + 1e-12).mean()
        total = term if total is None else total + term
    if total is None:
        return torch.zeros(())
    return total


@dataclass(frozen=True)
class LossWeights:
    """Relative weights of the objective's terms."""

    alpha: float = 0.05  # L2 similarity
    beta: float = 1.0  # class margin loss
    epsilons: tuple[float, ...] = (1e-4, 2e-4)  # per attacked layer

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or any(e < 0 for e in self.epsilons):
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossReport:
    """Per-term scalar values for one optimizer step."""

    gan_g: float
    gan_d: float
    l2: float
    dag_class: float
    feature: tuple[float, ...]
    total: float

    def as_dict(self) -> dict:
        return {
            "gan_g": self.gan_g,
            "gan_d": self.gan_d,
            "l2": self.l2,
            "dag_class": self.dag_class,
            "feature": list(self.feature),
            "total": self.total,
        }


def total_loss(
    gan_g: torch.Tensor,
    l2: torch.Tensor,
    dag_class: torch.Tensor,
    feature_terms: list[torch.Tensor],
    weights: LossWeights,
    gan_d: torch.Tensor | float = 0.0,
) -> tuple[torch.Tensor, LossReport]:
    """Weighted sum the generator minimizes, plus a per-term report.

    The discriminator's own loss is carried in the report but not in the
    generator's total.
    """
    if len(feature_terms) > len(weights.epsilons):
        raise ValueError("more feature terms than epsilon weights")
    total = gan_g + weights.alpha * l2 + weights.beta * dag_class
    for eps, term in zip(weights.epsilons, feature_terms):
        total = total + eps * term
    # the report total is recomputed in float64 so its arithmetic identity
    # holds exactly, independent of tensor dtype
    feature_vals = tuple(float(t.detach()) for t in feature_terms)
    report = LossReport(
        gan_g=float(gan_g.detach()),
        gan_d=float(gan_d.detach()) if isinstance(gan_d, torch.Tensor) else float(gan_d),
        l2=float(l2.detach()),
        dag_class=float(dag_class.detach()),
        feature=feature_vals,
        total=float(gan_g.detach())
        + weights.alpha * float(l2.detach())
        + weights.beta * float(dag_class.detach())
        + sum(e * f for e, f in zip(weights.epsilons, feature_vals)),
    )
    return total, report


@dataclass
class RandomTargetFeatures:
    """Fixed random targets for the attacked layers, reproducible from seed."""

    seed: int
    targets: list[torch.Tensor] = field(default_factory=list)

    @classmethod
    def create(
        cls, shapes: list[tuple[int, ...]], seed: int, scale: float = 1.0
    ) -> "RandomTargetFeatures":
        gen = torch.Generator().manual_seed(seed)
        targets = [scale * torch.randn(shape, generator=gen) for shape in shapes]
        return cls(seed=seed, targets=targets)

    def state_dict(self) -> dict:
        return {"seed": self.seed, "targets": [t.clone() for t in self.targets]}

    @classmethod
    def from_state_dict(cls, state: dict) -> "RandomTargetFeatures":
        return cls(seed=state["seed"], targets=list(state["targets"]))
