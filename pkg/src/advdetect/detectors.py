"""Toy victim detectors: a proposal-based (RPN + region classifier) and a
regression-based (dense grid head) detector sharing one convolutional
backbone.

Both families expose feature extraction from the same backbone; the
proposal family additionally exposes scored region proposals and per-region
classification. Class indices run 0..C-1 for foreground classes, with the
background class at index C.
"""

from __future__ import annotations

import secrets
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torchvision.ops import box_iou, nms, roi_align

from advdetect.boxes import BoundingBox, Detection, GroundTruthObject, Image, Proposal
from advdetect.data import DatasetManifest
from advdetect.evaluation import mean_average_precision
from advdetect.tensors import seed_everything, to_tensor

PROPOSAL_FAMILY = "proposal"
REGRESSION_FAMILY = "regression"


class CapabilityError(RuntimeError):
    """Raised when a proposal-only operation is invoked on a regression detector."""


class TrainingFailureError(RuntimeError):
    """Raised when detector training misses its mAP floor; carries diagnostics."""

    def __init__(self, message: str, history: list[tuple[int, float]] | None = None):
        super().__init__(message)
        self.history = history or []


@dataclass
class FeatureMapSet:
    """Per-layer backbone activations with their strides relative to the input.

    attack_indices names the two mid-level layers the feature loss targets.
    """

    layers: list[torch.Tensor]
    strides: list[int]
    attack_indices: tuple[int, ...]

    @property
    def final(self) -> torch.Tensor:
        return self.layers[-1]

    @property
    def attack_layers(self) -> list[torch.Tensor]:
        return [self.layers[i] for i in self.attack_indices]

    @property
    def attack_strides(self) -> list[int]:
        return [self.strides[i] for i in self.attack_indices]


class Backbone(nn.Module):
    """Six 3x3 convs with two stride-2 stages; output stride 4.

    The post-relu outputs of the second and fourth convs (strides 2 and 4)
    are the attackable mid-level layers.
    """

    def __init__(self, channels: tuple[int, ...] = (16, 32, 32, 64, 64, 64)):
        super().__init__()
        strides_per_conv = (1, 2, 1, 2, 1, 1)
        layers = []
        in_ch = 3
        cum = 1
        self.strides: list[int] = []
        for ch, s in zip(channels, strides_per_conv):
            layers.append(nn.Conv2d(in_ch, ch, 3, stride=s, padding=1))
            in_ch = ch
            cum *= s
            self.strides.append(cum)
        self.convs = nn.ModuleList(layers)
        self.attack_indices = (1, 3)
        self.out_channels = channels[-1]
        self.out_stride = cum

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        outs = []
        for conv in self.convs:
            x = F.relu(conv(x))
            outs.append(x)
        return outs


def _boxes_to_tensor(boxes: list[BoundingBox], dtype=torch.float32) -> torch.Tensor:
    if not boxes:
        return torch.zeros((0, 4), dtype=dtype)
    return torch.tensor([b.as_tuple() for b in boxes], dtype=dtype)


def _encode_deltas(boxes: torch.Tensor, anchors: torch.Tensor) -> torch.Tensor:
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = (anchors[:, 0] + anchors[:, 2]) / 2
    acy = (anchors[:, 1] + anchors[:, 3]) / 2
    bw = (boxes[:, 2] - boxes[:, 0]).clamp(min=1e-3)
    bh = (boxes[:, 3] - boxes[:, 1]).clamp(min=1e-3)
    bcx = (boxes[:, 0] + boxes[:, 2]) / 2
    bcy = (boxes[:, 1] + boxes[:, 3]) / 2
    return torch.stack(
        [(bcx - acx) / aw, (bcy - acy) / ah, torch.log(bw / aw), torch.log(bh / ah)],
        dim=1,
    )


def _decode_deltas(deltas: torch.Tensor, anchors: torch.Tensor) -> torch.Tensor:
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = (anchors[:, 0] + anchors[:, 2]) / 2
    acy = (anchors[:, 1] + anchors[:, 3]) / 2
    cx = acx + deltas[:, 0] * aw
    cy = acy + deltas[:, 1] * ah
    w = aw * torch.exp(deltas[:, 2].clamp(-4, 4))
    h = ah * torch.exp(deltas[:, 3].clamp(-4, 4))
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=1)


class _DetectorBase(nn.Module):
    """Shared handle fields and feature extraction."""

    family = ""
    # which backbone layer the detection head reads (-1 = final layer)
    feature_index = -1

    def __init__(self, backbone: Backbone, num_classes: int, backbone_token: str):
        super().__init__()
        self.backbone = backbone
        self.num_classes = num_classes  # foreground classes
        self.backbone_token = backbone_token
        self.nms_iou = 0.45

    @property
    def total_classes(self) -> int:
        return self.num_classes + 1

    @property
    def background_label(self) -> int:
        return self.num_classes

    def _image_tensor(self, image: Image | torch.Tensor) -> torch.Tensor:
        if isinstance(image, torch.Tensor):
            t = image
        else:
            t = to_tensor(image, dtype=next(self.parameters()).dtype)
        if t.dim() == 3:
            t = t[None]
        if t.shape[-1] < 16 or t.shape[-2] < 16:
            raise ValueError(f"image {tuple(t.shape[-2:])} below backbone minimum 16x16")
        return t

    def extract_features(self, image: Image | torch.Tensor) -> FeatureMapSet:
        """Backbone activations for one image. Differentiable when called
        with a tensor that requires grad."""
        t = self._image_tensor(image)
        outs = self.backbone(t)
        squeeze = not isinstance(image, torch.Tensor) or image.dim() == 3
        layers = [o[0] if squeeze else o for o in outs]
        return FeatureMapSet(layers, list(self.backbone.strides), self.backbone.attack_indices)

    def _anchors(self, h: int, w: int, device, dtype) -> torch.Tensor:
        """One square anchor per output-stride cell, centered on the cell."""
        s = self.backbone.out_stride
        gh, gw = h // s, w // s
        ys = (torch.arange(gh, dtype=dtype, device=device) + 0.5) * s
        xs = (torch.arange(gw, dtype=dtype, device=device) + 0.5) * s
        cy, cx = torch.meshgrid(ys, xs, indexing="ij")
        half = self.anchor_size / 2
        return torch.stack(
            [cx - half, cy - half, cx + half, cy + half], dim=-1
        ).reshape(-1, 4)


class ProposalDetector(_DetectorBase):
    """Two-stage detector: objectness/box proposal head plus a pooled-region
    classification head."""

    family = PROPOSAL_FAMILY

    def __init__(
        self,
        backbone: Backbone,
        num_classes: int,
        backbone_token: str,
        anchor_size: float = 20.0,
        roi_size: int = 4,
        pre_nms_top_n: int = 256,
        post_nms_top_n: int = 100,
        proposal_nms_iou: float = 0.7,
    ):
        super().__init__(backbone, num_classes, backbone_token)
        self.anchor_size = anchor_size
        self.roi_size = roi_size
        self.pre_nms_top_n = pre_nms_top_n
        self.post_nms_top_n = post_nms_top_n
        self.proposal_nms_iou = proposal_nms_iou
        ch = backbone.out_channels
        self.rpn_conv = nn.Conv2d(ch, ch, 3, padding=1)
        self.rpn_obj = nn.Conv2d(ch, 1, 1)
        self.rpn_box = nn.Conv2d(ch, 4, 1)
        self.cls_fc1 = nn.Linear(ch * roi_size * roi_size, 128)
        self.cls_fc2 = nn.Linear(128, self.total_classes)

    # -- proposal stage -----------------------------------------------------

    def _rpn_forward(self, final_map: torch.Tensor):
        """(anchors, objectness logits, box deltas) for a batched final map."""
        h = F.relu(self.rpn_conv(final_map))
        obj = self.rpn_obj(h).flatten(1)  # (B, cells)
        box = self.rpn_box(h).permute(0, 2, 3, 1).reshape(final_map.shape[0], -1, 4)
        return obj, box

    def propose_tensors(
        self, final_map: torch.Tensor, image_hw: tuple[int, int]
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Proposal boxes and scores (detached, sorted by descending score)
        for a single-image final map (C, h, w) or (1, C, h, w)."""
        if final_map.dim() == 3:
            final_map = final_map[None]
        obj, box = self._rpn_forward(final_map)
        obj, box = obj[0].detach(), box[0].detach()
        anchors = self._anchors(*image_hw, obj.device, obj.dtype)
        scores = torch.sigmoid(obj)
        k = min(self.pre_nms_top_n, scores.numel())
        top = torch.topk(scores, k)
        boxes = _decode_deltas(box[top.indices], anchors[top.indices])
        boxes[:, 0::2] = boxes[:, 0::2].clamp(0, image_hw[1])
        boxes[:, 1::2] = boxes[:, 1::2].clamp(0, image_hw[0])
        keep = (boxes[:, 2] - boxes[:, 0] > 1e-3) & (boxes[:, 3] - boxes[:, 1] > 1e-3)
        boxes, scores = boxes[keep], top.values[keep]
        keep = nms(boxes, scores, self.proposal_nms_iou)[: self.post_nms_top_n]
        return boxes[keep], scores[keep]

    def propose(self, features: FeatureMapSet, image_hw: tuple[int, int] | None = None) -> list[Proposal]:
        """Scored proposals from a feature set, sorted by descending score."""
        final = features.final
        if image_hw is None:
            h, w = final.shape[-2:]
            image_hw = (h * self.backbone.out_stride, w * self.backbone.out_stride)
        boxes, scores = self.propose_tensors(final, image_hw)
        out = []
        for b, s in zip(boxes.tolist(), scores.tolist()):
            try:
                out.append(Proposal(BoundingBox(*b), float(min(max(s, 0.0), 1.0))))
            except ValueError:
                continue  # degenerate decoded box
        return out

    # -- classification stage ----------------------------------------------

    def classify_rois(self, final_map: torch.Tensor, boxes: torch.Tensor) -> torch.Tensor:
        """Pre-softmax logits (N, C+1) for regions of a single-image final
        map. Differentiable w.r.t. the feature map (and hence the pixels)."""
        if final_map.dim() == 3:
            final_map = final_map[None]
        rois = torch.cat([torch.zeros(len(boxes), 1, dtype=boxes.dtype), boxes], dim=1)
        pooled = roi_align(
            final_map,
            rois.to(final_map.dtype),
            output_size=self.roi_size,
            spatial_scale=1.0 / self.backbone.out_stride,
            aligned=True,
        )
        h = F.relu(self.cls_fc1(pooled.flatten(1)))
        return self.cls_fc2(h)

    def classify_proposal(
        self, features: FeatureMapSet, box: BoundingBox
    ) -> torch.Tensor:
        """Pre-softmax class score vector for one region."""
        boxes = _boxes_to_tensor([box], dtype=features.final.dtype)
        return self.classify_rois(features.final, boxes)[0]

    # -- detection ----------------------------------------------------------

    @torch.no_grad()
    def detect(self, image: Image | torch.Tensor, score_threshold: float = 0.5) -> list[Detection]:
        if not (0.0 <= score_threshold <= 1.0):
            raise ValueError("score_threshold outside [0, 1]")
        t = self._image_tensor(image)
        outs = self.backbone(t)
        final = outs[-1]
        boxes, _ = self.propose_tensors(final, (t.shape[-2], t.shape[-1]))
        if len(boxes) == 0:
            return []
        logits = self.classify_rois(final, boxes)
        probs = torch.softmax(logits, dim=1)
        conf, label = probs[:, : self.num_classes].max(dim=1)
        keep = conf >= score_threshold
        boxes, conf, label = boxes[keep], conf[keep], label[keep]
        detections = []
        for c in label.unique().tolist():
            mask = label == c
            idx = nms(boxes[mask], conf[mask], self.nms_iou)
            for b, s in zip(boxes[mask][idx].tolist(), conf[mask][idx].tolist()):
                try:
                    detections.append(Detection(BoundingBox(*b), int(c), float(s)))
                except ValueError:
                    continue
        detections.sort(key=lambda d: -d.confidence)
        return detections


class RegressionDetector(_DetectorBase):
    """One-stage detector: dense per-cell class + box regression over the
    shared backbone, through its own small head stack.

    Like single-shot detectors that tap mid-level backbone maps, the head
    reads an intermediate shared layer (default: the second stride-4 stage)
    rather than the final one. The tapped layer must have the backbone's
    output stride so the anchor grid lines up.
    """

    family = REGRESSION_FAMILY

    def __init__(
        self,
        backbone: Backbone,
        num_classes: int,
        backbone_token: str,
        anchor_size: float = 20.0,
        feature_index: int = 3,
    ):
        super().__init__(backbone, num_classes, backbone_token)
        self.anchor_size = anchor_size
        self.feature_index = feature_index
        if backbone.strides[feature_index] != backbone.out_stride:
            raise ValueError(
                f"head layer stride {backbone.strides[feature_index]} != "
                f"backbone output stride {backbone.out_stride}"
            )
        ch = backbone.convs[feature_index].out_channels
        self.head = nn.Sequential(
            nn.Conv2d(ch, ch, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(ch, ch, 3, padding=1),
            nn.ReLU(),
        )
        self.pred = nn.Conv2d(ch, self.total_classes + 4, 1)

    def propose(self, *args, **kwargs):
        raise CapabilityError("regression-based detector has no proposal stage")

    def classify_proposal(self, *args, **kwargs):
        raise CapabilityError("regression-based detector has no proposal classifier")

    def _head_forward(self, final_map: torch.Tensor):
        """(class logits (B, cells, C+1), box deltas (B, cells, 4))."""
        p = self.pred(self.head(final_map))
        p = p.permute(0, 2, 3, 1).reshape(final_map.shape[0], -1, self.total_classes + 4)
        return p[..., : self.total_classes], p[..., self.total_classes :]

    @torch.no_grad()
    def detect(self, image: Image | torch.Tensor, score_threshold: float = 0.5) -> list[Detection]:
        if not (0.0 <= score_threshold <= 1.0):
            raise ValueError("score_threshold outside [0, 1]")
        t = self._image_tensor(image)
        final = self.backbone(t)[self.feature_index]
        logits, deltas = self._head_forward(final)
        logits, deltas = logits[0], deltas[0]
        anchors = self._anchors(t.shape[-2], t.shape[-1], t.device, t.dtype)
        probs = torch.softmax(logits, dim=1)
        conf, label = probs[:, : self.num_classes].max(dim=1)
        keep = conf >= score_threshold
        if not keep.any():
            return []
        boxes = _decode_deltas(deltas[keep], anchors[keep])
        boxes[:, 0::2] = boxes[:, 0::2].clamp(0, t.shape[-1])
        boxes[:, 1::2] = boxes[:, 1::2].clamp(0, t.shape[-2])
        conf, label = conf[keep], label[keep]
        detections = []
        for c in label.unique().tolist():
            mask = label == c
            idx = nms(boxes[mask], conf[mask], self.nms_iou)
            for b, s in zip(boxes[mask][idx].tolist(), conf[mask][idx].tolist()):
                try:
                    detections.append(Detection(BoundingBox(*b), int(c), float(s)))
                except ValueError:
                    continue
        detections.sort(key=lambda d: -d.confidence)
        return detections


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class DetectorConfig:
    epochs: int = 40
    lr: float = 2e-3
    batch_size: int = 16
    seed: int = 0
    map_floor: float = 0.85
    map_floor_regression: float = 0.80
    anchor_size: float = 20.0
    eval_every: int = 5
    eval_threshold: float = 0.3  # confidence cut when computing val mAP
    backbone_channels: tuple[int, ...] = (16, 32, 32, 64, 64, 64)


def _stack_batch(entries) -> torch.Tensor:
    return torch.stack([to_tensor(e.load()) for e in entries])


def _rpn_targets(
    anchors: torch.Tensor, gts: list[GroundTruthObject]
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(objectness target in {1, 0, -1=ignore}, positive mask, matched boxes)."""
    n = len(anchors)
    obj = torch.full((n,), -1.0)
    matched = torch.zeros((n, 4))
    if not gts:
        obj[:] = 0.0
        return obj, obj > 0, matched
    gt_boxes = _boxes_to_tensor([g.box for g in gts])
    ious = box_iou(anchors, gt_boxes)  # (n, G)
    max_iou, argmax = ious.max(dim=1)
    obj[max_iou < 0.3] = 0.0
    obj[max_iou >= 0.5] = 1.0
    best_anchor = ious.argmax(dim=0)  # one per gt
    obj[best_anchor] = 1.0
    argmax[best_anchor] = torch.arange(len(gts))
    pos = obj > 0
    matched[pos] = gt_boxes[argmax[pos]]
    return obj, pos, matched


def _sample_training_rois(
    gts: list[GroundTruthObject],
    image_hw: tuple[int, int],
    rng: np.random.Generator,
    num_random: int = 8,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Ground-truth boxes, jittered copies, and random background boxes with
    their class labels (background = num foreground classes, fixed later)."""
    h, w = image_hw
    boxes, labels = [], []
    for g in gts:
        boxes.append(list(g.box.as_tuple()))
        labels.append(g.label)
        for _ in range(2):
            jitter = rng.uniform(-3, 3, size=4)
            x0, y0, x1, y1 = np.array(g.box.as_tuple()) + jitter
            x0, x1 = np.clip(sorted((x0, x1)), 0, w)
            y0, y1 = np.clip(sorted((y0, y1)), 0, h)
            if x1 - x0 > 2 and y1 - y0 > 2:
                boxes.append([x0, y0, x1, y1])
                labels.append(g.label)
    for _ in range(num_random):
        size = rng.uniform(8, 0.5 * min(h, w))
        x0 = rng.uniform(0, w - size)
        y0 = rng.uniform(0, h - size)
        boxes.append([x0, y0, x0 + size, y0 + size])
        labels.append(-1)  # resolved against gts below
    return torch.tensor(boxes, dtype=torch.float32), torch.tensor(labels)


def _resolve_roi_labels(
    boxes: torch.Tensor, labels: torch.Tensor, gts: list[GroundTruthObject], background: int
) -> torch.Tensor:
    out = labels.clone()
    unresolved = labels == -1
    if not unresolved.any():
        return out
    if not gts:
        out[unresolved] = background
        return out
    gt_boxes = _boxes_to_tensor([g.box for g in gts])
    gt_labels = torch.tensor([g.label for g in gts])
    ious = box_iou(boxes[unresolved], gt_boxes)
    max_iou, argmax = ious.max(dim=1)
    resolved = torch.where(max_iou >= 0.5, gt_labels[argmax], torch.full_like(argmax, background))
    out[unresolved] = resolved
    return out


def evaluate_detector_map(
    detector: _DetectorBase,
    manifest: DatasetManifest,
    score_threshold: float = 0.3,
) -> float:
    detector.eval()
    dets = [detector.detect(e.load(), score_threshold) for e in manifest.entries]
    gts = [list(e.objects) for e in manifest.entries]
    m, _ = mean_average_precision(dets, gts, manifest.num_classes)
    detector.train()
    return m


def train_toy_detector(
    family: str,
    train_set: DatasetManifest,
    val_set: DatasetManifest,
    config: DetectorConfig | None = None,
    backbone: Backbone | None = None,
) -> ProposalDetector | RegressionDetector:
    """Train one toy detector on a shapes dataset to its mAP floor.

    Passing an existing backbone shares (and freezes) its weights, so that
    both families can be built over identical features. Raises
    TrainingFailureError with the mAP history if the floor is missed.
    """
    if config is None:
        config = DetectorConfig()
    seed_everything(config.seed)
    rng = np.random.default_rng(config.seed)
    num_classes = train_set.num_classes

    freeze_backbone = backbone is not None
    if backbone is None:
        backbone = Backbone(config.backbone_channels)
    token = getattr(backbone, "token", None) or secrets.token_hex(8)
    backbone.token = token

    if family == PROPOSAL_FAMILY:
        detector = ProposalDetector(backbone, num_classes, token, anchor_size=config.anchor_size)
    elif family == REGRESSION_FAMILY:
        detector = RegressionDetector(backbone, num_classes, token, anchor_size=config.anchor_size)
    else:
        raise ValueError(f"unknown detector family {family!r}")

    if freeze_backbone:
        for p in backbone.parameters():
            p.requires_grad_(False)
    params = [p for p in detector.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=config.lr)

    floor = config.map_floor if family == PROPOSAL_FAMILY else config.map_floor_regression
    entries = list(train_set.entries)
    history: list[tuple[int, float]] = []
    best_state = None
    best_map = -1.0
    for epoch in range(config.epochs):
        order = rng.permutation(len(entries))
        for start in range(0, len(entries), config.batch_size):
            batch = [entries[i] for i in order[start : start + config.batch_size]]
            images = _stack_batch(batch)
            loss = _training_step(detector, images, batch, rng, freeze_backbone)
            opt.zero_grad()
            loss.backward()
            opt.step()
        if (epoch + 1) % config.eval_every == 0 or epoch == config.epochs - 1:
            val_map = evaluate_detector_map(detector, val_set, config.eval_threshold)
            history.append((epoch + 1, val_map))
            if val_map > best_map:
                best_map = val_map
                best_state = {k: v.clone() for k, v in detector.state_dict().items()}
            if val_map >= floor + 0.03:
                break
    if best_state is not None:
        detector.load_state_dict(best_state)
    detector.eval()
    if best_map < floor:
        raise TrainingFailureError(
            f"{family} detector reached mAP {best_map:.3f} < floor {floor} "
            f"after {config.epochs} epochs; history={history}",
            history,
        )
    detector.val_map = best_map
    return detector


def _training_step(detector, images, batch, rng, frozen_backbone: bool) -> torch.Tensor:
    finals = detector.backbone(images)[detector.feature_index]
    h, w = images.shape[-2:]
    anchors = detector._anchors(h, w, images.device, images.dtype)
    if detector.family == PROPOSAL_FAMILY:
        obj_logits, box_deltas = detector._rpn_forward(finals)
        loss = images.new_zeros(())
        for i, entry in enumerate(batch):
            gts = list(entry.objects)
            obj_t, pos, matched = _rpn_targets(anchors, gts)
            valid = obj_t >= 0
            loss = loss + F.binary_cross_entropy_with_logits(
                obj_logits[i][valid], obj_t[valid]
            )
            if pos.any():
                target_deltas = _encode_deltas(matched[pos], anchors[pos])
                loss = loss + F.smooth_l1_loss(box_deltas[i][pos], target_deltas)
            rois, labels = _sample_training_rois(gts, (h, w), rng)
            labels = _resolve_roi_labels(rois, labels, gts, detector.background_label)
            # the backbone learns only from the objectness/localization
            # losses; region classification is learned on top of those
            # generic features, as with a pretrained feature network
            logits = detector.classify_rois(finals[i : i + 1].detach(), rois)
            loss = loss + F.cross_entropy(logits, labels)
        return loss / len(batch)

    # regression family: dense per-cell targets
    logits, deltas = detector._head_forward(finals)
    loss = images.new_zeros(())
    for i, entry in enumerate(batch):
        gts = list(entry.objects)
        obj_t, pos, matched = _rpn_targets(anchors, gts)
        cls_target = torch.full((len(anchors),), detector.background_label, dtype=torch.long)
        if gts and pos.any():
            gt_boxes = _boxes_to_tensor([g.box for g in gts])
            gt_labels = torch.tensor([g.label for g in gts])
            ious = box_iou(anchors[pos], gt_boxes)
            cls_target[pos] = gt_labels[ious.argmax(dim=1)]
        weights = torch.ones(detector.total_classes)
        weights[detector.background_label] = 0.25
        loss = loss + F.cross_entropy(logits[i], cls_target, weight=weights)
        if pos.any():
            target_deltas = _encode_deltas(matched[pos], anchors[pos])
            loss = loss + F.smooth_l1_loss(deltas[i][pos], target_deltas)
    return loss / len(batch)
