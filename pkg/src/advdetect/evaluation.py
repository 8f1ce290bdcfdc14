"""Attack evaluation: fooling predicate, VOC-style mAP, mAP drop, timing and
perceptibility measurements."""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from advdetect.boxes import BoundingBox, Detection, GroundTruthObject, Image, iou

FOOLING_IOU = 0.5
DEPLOYMENT_THRESHOLD = 0.5


def is_fooled(gt: GroundTruthObject, det: Detection | None) -> bool:
    """An object is fooled when no detection remains, the overlap dropped
    below 0.5, or the label changed. IOU exactly 0.5 counts as not fooled."""
    if det is None:
        return True
    return iou(det.box, gt.box) < FOOLING_IOU or det.label != gt.label


def match_detection(
    gt: GroundTruthObject, detections: Sequence[Detection]
) -> Detection | None:
    """Best-overlap detection for a ground-truth object, or None."""
    best, best_iou = None, 0.0
    for det in detections:
        v = iou(det.box, gt.box)
        if v > best_iou:
            best, best_iou = det, v
    return best


def average_precision(
    detections: Sequence[tuple[int, Detection]],
    ground_truths: Sequence[tuple[int, GroundTruthObject]],
    iou_threshold: float = 0.5,
    eleven_point: bool = True,
) -> float:
    """Single-class average precision with greedy confidence-ordered matching.

    detections/ground_truths are (image_index, record) pairs. Each ground
    truth is matched at most once. Ties in confidence are broken by stable
    input order. Default is the VOC-2007 11-point interpolation; with
    eleven_point=False, the all-point interpolated area is used.
    """
    n_gt = len(ground_truths)
    if n_gt == 0:
        return 0.0
    if not detections:
        return 0.0
    gts_by_image: dict[int, list[GroundTruthObject]] = {}
    for img, gt in ground_truths:
        gts_by_image.setdefault(img, []).append(gt)
    matched: dict[int, list[bool]] = {k: [False] * len(v) for k, v in gts_by_image.items()}

    order = sorted(range(len(detections)), key=lambda i: -detections[i][1].confidence)
    tp = np.zeros(len(order))
    fp = np.zeros(len(order))
    for rank, i in enumerate(order):
        img, det = detections[i]
        candidates = gts_by_image.get(img, [])
        best_j, best_iou = -1, 0.0
        for j, gt in enumerate(candidates):
            v = iou(det.box, gt.box)
            if v > best_iou:
                best_j, best_iou = j, v
        if best_j >= 0 and best_iou >= iou_threshold and not matched[img][best_j]:
            matched[img][best_j] = True
            tp[rank] = 1
        else:
            fp[rank] = 1

    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(fp)
    recall = tp_cum / n_gt
    precision = tp_cum / np.maximum(tp_cum + fp_cum, 1e-12)

    if eleven_point:
        ap = 0.0
        for t in np.arange(0.0, 1.1, 0.1):
            mask = recall >= t - 1e-12
            p = precision[mask].max() if mask.any() else 0.0
            ap += p / 11.0
        return float(ap)
    # all-point: area under the monotone precision envelope
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(mpre.size - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def mean_average_precision(
    per_image_detections: Sequence[Sequence[Detection]],
    per_image_gts: Sequence[Sequence[GroundTruthObject]],
    num_classes: int,
    iou_threshold: float = 0.5,
    eleven_point: bool = True,
) -> tuple[float, dict[int, float]]:
    """mAP over classes. A class with no ground truths and no detections is
    excluded from the mean; with detections but no ground truths its AP is 0."""
    aps: dict[int, float] = {}
    for c in range(num_classes):
        dets = [
            (i, d)
            for i, dets in enumerate(per_image_detections)
            for d in dets
            if d.label == c
        ]
        gts = [
            (i, g)
            for i, gts in enumerate(per_image_gts)
            for g in gts
            if g.label == c
        ]
        if not gts and not dets:
            continue
        if not gts:
            aps[c] = 0.0
            continue
        aps[c] = average_precision(dets, gts, iou_threshold, eleven_point)
    if not aps:
        return 0.0, aps
    return float(np.mean(list(aps.values()))), aps


def perceptibility(clean: Image | np.ndarray, adv: Image | np.ndarray) -> tuple[float, float]:
    """(mean per-pixel channel-vector L2, max absolute channel difference)."""
    c = clean.pixels if isinstance(clean, Image) else np.asarray(clean)
    a = adv.pixels if isinstance(adv, Image) else np.asarray(adv)
    if c.shape != a.shape:
        raise ValueError(f"shape mismatch: {c.shape} vs {a.shape}")
    diff = c.astype(np.float64) - a.astype(np.float64)
    per_pixel = np.sqrt((diff**2).sum(axis=0))
    return float(per_pixel.mean()), float(np.abs(diff).max())


@dataclass
class TimingStats:
    mean: float
    median: float
    stddev: float
    times: list[float] = field(default_factory=list)


def timing_benchmark(
    attack: Callable[[Image], object],
    images: Sequence[Image],
    warmup: int = 2,
) -> TimingStats:
    """Wall-time per image for an attack callable, after warmup runs.

    Only adversarial-example generation is timed; evaluating detectors on
    the outputs is not included.
    """
    if len(images) - warmup < 5:
        raise ValueError("need at least 5 timed runs after warmup")
    for img in images[:warmup]:
        attack(img)
    times = []
    for img in images[warmup:]:
        t0 = time.perf_counter()
        attack(img)
        times.append(time.perf_counter() - t0)
    return TimingStats(
        mean=statistics.fmean(times),
        median=statistics.median(times),
        stddev=statistics.stdev(times) if len(times) > 1 else 0.0,
        times=times,
    )


@dataclass
class EvalReport:
    """Aggregated attack evaluation against one detector."""

    clean_map: float
    attacked_map: float
    clean_ap: dict[int, float]
    attacked_ap: dict[int, float]
    mean_l2: float
    mean_linf: float
    fooled_flags: list[list[bool]]
    mean_attack_time: float | None = None

    @property
    def map_drop(self) -> float:
        return self.clean_map - self.attacked_map

    @property
    def fooling_rate(self) -> float:
        flags = [f for per_image in self.fooled_flags for f in per_image]
        return float(np.mean(flags)) if flags else 0.0

    def summary(self) -> dict:
        return {
            "clean_map": self.clean_map,
            "attacked_map": self.attacked_map,
            "map_drop": self.map_drop,
            "mean_l2": self.mean_l2,
            "mean_linf": self.mean_linf,
            "fooling_rate": self.fooling_rate,
            "mean_attack_time": self.mean_attack_time,
        }


def evaluate_attack(
    detect_fn: Callable[[Image], list[Detection]],
    clean_images: Sequence[Image],
    adversarial_images: Sequence[Image],
    ground_truths: Sequence[Sequence[GroundTruthObject]],
    num_classes: int,
    deployment_threshold: float = DEPLOYMENT_THRESHOLD,
    mean_attack_time: float | None = None,
) -> EvalReport:
    """Run a detector over aligned clean/adversarial sets and aggregate
    mAP drop, perceptibility, and per-object fooling flags."""
    if not (len(clean_images) == len(adversarial_images) == len(ground_truths)):
        raise ValueError("clean, adversarial, and ground-truth sets misaligned")
    clean_dets = [detect_fn(img) for img in clean_images]
    adv_dets = [detect_fn(img) for img in adversarial_images]
    clean_map, clean_ap = mean_average_precision(clean_dets, ground_truths, num_classes)
    adv_map, adv_ap = mean_average_precision(adv_dets, ground_truths, num_classes)

    l2s, linfs, fooled = [], [], []
    for clean, adv, gts, dets in zip(
        clean_images, adversarial_images, ground_truths, adv_dets
    ):
        l2, linf = perceptibility(clean, adv)
        l2s.append(l2)
        linfs.append(linf)
        deployed = [d for d in dets if d.confidence >= deployment_threshold]
        fooled.append([is_fooled(gt, match_detection(gt, deployed)) for gt in gts])

    return EvalReport(
        clean_map=clean_map,
        attacked_map=adv_map,
        clean_ap=clean_ap,
        attacked_ap=adv_ap,
        mean_l2=float(np.mean(l2s)) if l2s else 0.0,
        mean_linf=float(np.mean(linfs)) if linfs else 0.0,
        fooled_flags=fooled,
        mean_attack_time=mean_attack_time,
    )


def write_results(
    path,
    reports: dict[str, EvalReport],
    per_image_records: list[dict] | None = None,
) -> None:
    """Line-delimited JSON records (one per image) followed by a summary."""
    with open(path, "w") as f:
        for rec in per_image_records or []:
            f.write(json.dumps(rec) + "\n")
        f.write(json.dumps({"summary": {k: r.summary() for k, r in reports.items()}}) + "\n")


def results_table(rows: dict[str, dict[str, float | None]]) -> str:
    """Human-readable comparison table: rows are methods, columns metrics."""
    detectors = sorted({d for metrics in rows.values() for d in metrics if d != "time"})
    header = ["Method"] + [f"mAP[{d}]" for d in detectors] + ["Time (s)"]
    lines = ["  ".join(f"{h:>16}" for h in header)]
    for name, metrics in rows.items():
        cells = [f"{name:>16}"]
        for d in detectors:
            v = metrics.get(d)
            cells.append(f"{v:>16.4f}" if v is not None else f"{'-':>16}")
        t = metrics.get("time")
        cells.append(f"{t:>16.4f}" if t is not None else f"{'-':>16}")
        lines.append("  ".join(cells))
    return "\n".join(lines)
