"""Inspect the attention weights and the attack's loss terms directly.

The feature loss is focused on foreground by a per-pixel attention map:
each pixel's weight is the sum of the scores of the top-K proposals
covering it, normalized by K, then block-mean pooled down to each attacked
feature layer's resolution.
"""

import numpy as np
import torch

from advdetect.attention import attention_per_layer, compute_pixel_attention
from advdetect.boxes import BoundingBox, Proposal
from advdetect.losses import (
    LossWeights,
    attention_feature_loss,
    dag_class_loss,
    total_loss,
)

proposals = [
    Proposal(BoundingBox(8, 8, 24, 24), score=0.9),
    Proposal(BoundingBox(16, 16, 32, 32), score=0.6),
]
pixel = compute_pixel_attention(proposals, (32, 32))
print(f"pixel attention: shape {pixel.shape}, max {pixel.max():.3f} "
      f"(= (0.9 + 0.6) / 2 in the overlap)")

layers = attention_per_layer(proposals, (32, 32), strides=[2, 4])
print(f"per-layer attention shapes: {[a.shape for a in layers]}")

# the class loss rewards moving probability mass from the true label to a
# chosen adversarial label, summed over active proposals
logits = torch.tensor([[2.0, 0.5, -1.0], [1.0, 1.5, 0.0]], requires_grad=True)
cls = dag_class_loss(logits, true_labels=[0, 1], adv_labels=[2, 0])
print(f"\nclass loss on two proposals: {float(cls.detach()):.4f}")

feats = [torch.rand(8, 16, 16)]
targets = [torch.rand(8, 16, 16)]
att = [torch.from_numpy(layers[0][:16, :16]).float()]
feat = attention_feature_loss(feats, targets, att)
print(f"attention feature loss: {float(feat):.4f}")

total, report = total_loss(
    gan_g=torch.tensor(0.7),
    l2=torch.tensor(2.0),
    dag_class=cls,
    feature_terms=[feat],
    weights=LossWeights(),
)
print(f"\nweighted total {float(total):.4f}; per-term report: {report.as_dict()}")
