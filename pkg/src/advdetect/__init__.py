"""Adversarial attacks on object detectors: a generative one-pass attack, an
iterative gradient baseline, toy victims, and an mAP-drop evaluation harness."""

from advdetect.boxes import (
    BoundingBox,
    Detection,
    FrameSequence,
    GroundTruthObject,
    Image,
    Proposal,
    iou,
)

__all__ = [
    "BoundingBox",
    "Detection",
    "FrameSequence",
    "GroundTruthObject",
    "Image",
    "Proposal",
    "iou",
]
