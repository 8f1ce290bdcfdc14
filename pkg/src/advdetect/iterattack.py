"""Iterative optimization baseline attack against proposal-based detectors.

Each iteration recomputes proposals, keeps high-scoring ones still
classified as their assigned label, and takes an L-infinity-normalized
gradient step on the class margin loss. The loop ends when no active
proposal remains or the iteration budget is spent.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch

from advdetect.boxes import BoundingBox, GroundTruthObject, Image, Proposal, iou
from advdetect.detectors import CapabilityError, ProposalDetector
from advdetect.genattack import AttackArtifacts
from advdetect.losses import dag_class_loss, match_true_labels
from advdetect.tensors import to_image, to_tensor


@dataclass
class IterativeAttackConfig:
    max_iterations: int = 150
    step_scale: float = 0.5 / 255  # gamma: L-inf step size in [0,1] units
    proposal_threshold: float = 0.7
    label_inherit_iou: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.step_scale <= 0:
            raise ValueError("step_scale must be positive")


@dataclass
class _LabeledRegion:
    box: BoundingBox
    true_label: int
    adv_label: int


def _random_wrong_label(rng: np.random.Generator, true_label: int, num_classes: int) -> int:
    wrong = int(rng.integers(0, num_classes - 1))
    return wrong if wrong < true_label else wrong + 1


def iterative_attack(
    victim: ProposalDetector,
    image: Image,
    config: IterativeAttackConfig | None = None,
    ground_truths: list[GroundTruthObject] | None = None,
) -> tuple[AttackArtifacts, int]:
    """Attack one image; returns the artifacts and the iteration count.

    Labels are assigned once at iteration 0: the true label comes from
    ground-truth matching when ground truths are given, otherwise from the
    victim's own classification; the adversarial label is random among the
    other classes. Proposals appearing in later iterations inherit the
    labels of the best-overlapping labeled region (IOU >= 0.3) or get fresh
    ones.
    """
    if not isinstance(victim, ProposalDetector):
        raise CapabilityError("iterative attack requires a proposal-based victim")
    config = config or IterativeAttackConfig()
    rng = np.random.default_rng(config.seed)
    victim.eval()

    t0 = time.perf_counter()
    x = to_tensor(image)
    hw = (image.height, image.width)
    regions: list[_LabeledRegion] = []
    iterations = 0

    for it in range(config.max_iterations):
        x = x.detach().requires_grad_(True)
        final = victim.backbone(x[None])[-1]
        boxes_t, scores_t = victim.propose_tensors(final, hw)
        keep = scores_t >= config.proposal_threshold
        boxes_t = boxes_t[keep]
        if len(boxes_t) == 0:
            break
        logits = victim.classify_rois(final, boxes_t)
        pred = logits.argmax(dim=1)

        true_labels, adv_labels, active_rows = [], [], []
        for row, box_vals in enumerate(boxes_t.tolist()):
            try:
                box = BoundingBox(*box_vals)
            except ValueError:
                continue
            best, best_iou = None, 0.0
            for reg in regions:
                v = iou(box, reg.box)
                if v > best_iou:
                    best, best_iou = reg, v
            if best is not None and best_iou >= config.label_inherit_iou:
                l_n, l_hat = best.true_label, best.adv_label
            else:
                if ground_truths is not None:
                    l_n = match_true_labels(
                        [Proposal(box, 1.0)], ground_truths, victim.background_label
                    )[0]
                else:
                    l_n = int(pred[row])
                l_hat = _random_wrong_label(rng, l_n, victim.total_classes)
                regions.append(_LabeledRegion(box, l_n, l_hat))
            if int(pred[row]) == l_n:
                true_labels.append(l_n)
                adv_labels.append(l_hat)
                active_rows.append(row)

        if not active_rows:
            break
        iterations += 1
        loss = dag_class_loss(logits[active_rows], true_labels, adv_labels)
        (grad,) = torch.autograd.grad(loss, x)
        g_max = grad.abs().max()
        if g_max == 0:
            break
        with torch.no_grad():
            x = (x - config.step_scale * grad / g_max).clamp(0.0, 1.0)

    wall = time.perf_counter() - t0
    adv = to_image(x, image_id=image.id)
    delta = adv.pixels - image.pixels
    per_pixel = np.sqrt((delta.astype(np.float64) ** 2).sum(axis=0))
    artifacts = AttackArtifacts(
        adversarial=adv,
        perturbation=delta,
        wall_time=wall,
        mean_l2=float(per_pixel.mean()),
        linf=float(np.abs(delta).max()),
    )
    return artifacts, iterations
