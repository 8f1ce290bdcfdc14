"""Core domain types: images, boxes, detections, proposals, frame sequences.

All types are immutable value objects and safe to share between workers.
Pixel values live in [0, 1] everywhere in this package; detector-specific
normalization happens inside the detector implementations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MIN_IMAGE_SIZE = 16


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in corner coordinates. Degenerate boxes are rejected."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(
                f"degenerate box: ({self.x_min}, {self.y_min}, {self.x_max}, {self.y_max})"
            )

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def clip(self, width: float, height: float) -> "BoundingBox":
        """Clip to image bounds; raises if the clipped box degenerates."""
        return BoundingBox(
            min(max(self.x_min, 0.0), float(width)),
            min(max(self.y_min, 0.0), float(height)),
            min(max(self.x_max, 0.0), float(width)),
            min(max(self.y_max, 0.0), float(height)),
        )


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two boxes; 0 when disjoint."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union


@dataclass(frozen=True)
class Image:
    """A pixel grid of shape (3, H, W) with values in [0, 1]."""

    pixels: np.ndarray
    id: str = ""

    def __post_init__(self):
        p = self.pixels
        if p.ndim != 3 or p.shape[0] != 3:
            raise ValueError(f"expected (3, H, W) pixels, got shape {p.shape}")
        if p.shape[1] < MIN_IMAGE_SIZE or p.shape[2] < MIN_IMAGE_SIZE:
            raise ValueError(f"image too small: {p.shape[1]}x{p.shape[2]}")
        if p.min() < 0.0 or p.max() > 1.0:
            raise ValueError("pixel values outside [0, 1]")
        p.setflags(write=False)

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]


@dataclass(frozen=True)
class GroundTruthObject:
    box: BoundingBox
    label: int

    def __post_init__(self):
        if self.label < 0:
            raise ValueError(f"negative class index {self.label}")


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    label: int
    confidence: float

    def __post_init__(self):
        if not (0.0 <= self.confidence <= 1.0):
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True)
class Proposal:
    """A scored candidate region, optionally carrying the label pair used by
    the misclassification loss (assigned true label / adversarial target)."""

    box: BoundingBox
    score: float
    true_label: int | None = None
    adv_label: int | None = None

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"proposal score {self.score} outside [0, 1]")
        if (
            self.true_label is not None
            and self.adv_label is not None
            and self.true_label == self.adv_label
        ):
            raise ValueError("adversarial label equals true label")


@dataclass(frozen=True)
class FrameSequence:
    """An ordered list of equally sized frames plus a frame rate."""

    frames: tuple[Image, ...]
    fps: float = 25.0

    def __post_init__(self):
        if self.fps <= 0:
            raise ValueError(f"fps must be positive, got {self.fps}")
        frames = tuple(self.frames)
        object.__setattr__(self, "frames", frames)
        if frames:
            h, w = frames[0].height, frames[0].width
            for i, f in enumerate(frames):
                if (f.height, f.width) != (h, w):
                    raise ValueError(
                        f"frame {i} has size {f.height}x{f.width}, expected {h}x{w}"
                    )

    def __len__(self) -> int:
        return len(self.frames)
