import numpy as np
import pytest
from hypothesis import given, strategies as st

from advdetect.boxes import (
    BoundingBox,
    Detection,
    FrameSequence,
    Image,
    Proposal,
    iou,
)


def boxes():
    coord = st.floats(0, 100, allow_nan=False)
    size = st.floats(0.5, 50, allow_nan=False)
    return st.builds(
        lambda x, y, w, h: BoundingBox(x, y, x + w, y + h), coord, coord, size, size
    )


class TestBoundingBox:
    def test_degenerate_rejected(self):
        with pytest.raises(ValueError):
            BoundingBox(0, 0, 0, 1)
        with pytest.raises(ValueError):
            BoundingBox(5, 2, 3, 4)

    def test_area(self):
        assert BoundingBox(0, 0, 2, 3).area == 6


class TestIou:
    def test_identical(self):
        b = BoundingBox(1, 2, 5, 7)
        assert iou(b, b) == 1.0

    def test_disjoint(self):
        assert iou(BoundingBox(0, 0, 1, 1), BoundingBox(5, 5, 6, 6)) == 0.0

    def test_partial_overlap(self):
        # intersection 1, union 4 + 4 - 1 = 7
        v = iou(BoundingBox(0, 0, 2, 2), BoundingBox(1, 1, 3, 3))
        assert v == pytest.approx(1 / 7)

    @given(boxes(), boxes())
    def test_symmetric_and_bounded(self, a, b):
        assert iou(a, b) == iou(b, a)
        assert 0.0 <= iou(a, b) <= 1.0

    @given(boxes())
    def test_self_iou_is_one(self, a):
        assert iou(a, a) == 1.0


class TestImage:
    def test_valid(self):
        img = Image(np.zeros((3, 16, 16), dtype=np.float32), id="x")
        assert img.height == img.width == 16

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            Image(np.full((3, 16, 16), 1.5, dtype=np.float32))

    def test_too_small(self):
        with pytest.raises(ValueError):
            Image(np.zeros((3, 8, 8), dtype=np.float32))

    def test_wrong_channels(self):
        with pytest.raises(ValueError):
            Image(np.zeros((1, 16, 16), dtype=np.float32))


class TestProposal:
    def test_conflicting_labels_rejected(self):
        with pytest.raises(ValueError):
            Proposal(BoundingBox(0, 0, 1, 1), 0.5, true_label=2, adv_label=2)

    def test_score_range(self):
        with pytest.raises(ValueError):
            Proposal(BoundingBox(0, 0, 1, 1), 1.5)


class TestDetection:
    def test_confidence_range(self):
        with pytest.raises(ValueError):
            Detection(BoundingBox(0, 0, 1, 1), 0, -0.1)


class TestFrameSequence:
    def test_mismatched_dims(self):
        a = Image(np.zeros((3, 16, 16), dtype=np.float32))
        b = Image(np.zeros((3, 32, 32), dtype=np.float32))
        with pytest.raises(ValueError):
            FrameSequence((a, b))

    def test_fps_positive(self):
        a = Image(np.zeros((3, 16, 16), dtype=np.float32))
        with pytest.raises(ValueError):
            FrameSequence((a,), fps=0)
