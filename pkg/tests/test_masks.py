"""Mask container, run-length codec, and overlap metric tests.

Expected values for the metric tests are derived by an independent
brute-force pixel count in this file, then frozen as literals.
"""

import numpy as np
import pytest

from pointprompt.errors import ValidationError
from pointprompt.masks import (
    BitMask,
    Box,
    SoftMask,
    bbox_of,
    bce_loss,
    decode_mask,
    dice_loss,
    encode_mask,
    iou,
    pixel_at,
)


def brute_iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = 0
    union = 0
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            if a[i, j] and b[i, j]:
                inter += 1
            if a[i, j] or b[i, j]:
                union += 1
    return 1.0 if union == 0 else inter / union


# ---------------------------------------------------------------------------
# run-length codec


def test_encode_all_zero() -> None:
    mask = BitMask(np.zeros((2, 2), dtype=bool))
    assert encode_mask(mask) == "2 2 4"


def test_encode_all_one() -> None:
    mask = BitMask(np.ones((2, 2), dtype=bool))
    assert encode_mask(mask) == "2 2 0 4"


def test_encode_single_row() -> None:
    mask = BitMask(np.array([[0, 1, 1]], dtype=bool))
    assert encode_mask(mask) == "3 1 1 2"


def test_decode_inverts_encode_examples() -> None:
    for rle in ["2 2 4", "2 2 0 4", "3 1 1 2"]:
        assert encode_mask(decode_mask(rle)) == rle


def test_roundtrip_random_masks() -> None:
    rng = np.random.default_rng(7)
    for _ in range(100):
        h = int(rng.integers(1, 24))
        w = int(rng.integers(1, 24))
        density = rng.uniform(0.0, 1.0)
        bits = rng.random((h, w)) < density
        mask = BitMask(bits)
        again = decode_mask(encode_mask(mask))
        assert again == mask


def test_decode_rejects_malformed() -> None:
    with pytest.raises(ValidationError):
        decode_mask("2 2")  # no counts
    with pytest.raises(ValidationError):
        decode_mask("2 2 3")  # counts sum below W*H
    with pytest.raises(ValidationError):
        decode_mask("2 2 5")  # counts sum above W*H
    with pytest.raises(ValidationError):
        decode_mask("2 2 1 0 3")  # interior zero run
    with pytest.raises(ValidationError):
        decode_mask("2 2 -1 5")  # negative run
    with pytest.raises(ValidationError):
        decode_mask("0 2 0")  # degenerate dimensions
    with pytest.raises(ValidationError):
        decode_mask("2 2 two 2")  # non-integer token


# ---------------------------------------------------------------------------
# IoU


def test_iou_identical() -> None:
    rng = np.random.default_rng(0)
    bits = rng.random((5, 7)) < 0.5
    m = BitMask(bits)
    assert iou(m, m) == 1.0


def test_iou_disjoint() -> None:
    a = np.zeros((4, 4), dtype=bool)
    b = np.zeros((4, 4), dtype=bool)
    a[0, 0] = True
    b[3, 3] = True
    assert iou(BitMask(a), BitMask(b)) == 0.0


def test_iou_half_overlap() -> None:
    # left half of a 4x4 raster against the full raster: 8 / 16
    a = np.zeros((4, 4), dtype=bool)
    a[:, :2] = True
    b = np.ones((4, 4), dtype=bool)
    assert iou(BitMask(a), BitMask(b)) == pytest.approx(0.5, abs=1e-6)


def test_iou_both_empty() -> None:
    a = BitMask(np.zeros((3, 3), dtype=bool))
    assert iou(a, a) == 1.0


def test_iou_shape_mismatch() -> None:
    with pytest.raises(ValidationError):
        iou(BitMask(np.zeros((2, 2), dtype=bool)), BitMask(np.zeros((3, 2), dtype=bool)))


def test_iou_matches_brute_force_and_is_symmetric() -> None:
    rng = np.random.default_rng(11)
    for _ in range(50):
        h = int(rng.integers(1, 12))
        w = int(rng.integers(1, 12))
        a = rng.random((h, w)) < rng.uniform(0, 1)
        b = rng.random((h, w)) < rng.uniform(0, 1)
        ma, mb = BitMask(a), BitMask(b)
        assert iou(ma, mb) == pytest.approx(brute_iou(a, b), abs=1e-12)
        assert iou(ma, mb) == iou(mb, ma)
        assert 0.0 <= iou(ma, mb) <= 1.0


# ---------------------------------------------------------------------------
# DICE


def test_dice_identical_binary() -> None:
    rng = np.random.default_rng(3)
    bits = rng.random((6, 6)) < 0.4
    bits[0, 0] = True  # keep non-empty
    m = BitMask(bits)
    assert dice_loss(SoftMask.from_bitmask(m), m) == pytest.approx(0.0, abs=1e-6)


def test_dice_total_miss() -> None:
    # all-ones prediction vs all-zeros 4x4 target:
    # 1 - (0 + 1) / (16 + 0 + 1) = 16/17
    pred = SoftMask(np.ones((4, 4)))
    target = BitMask(np.zeros((4, 4), dtype=bool))
    expected = 1.0 - 1.0 / 17.0
    assert dice_loss(pred, target) == pytest.approx(expected, abs=1e-6)
    assert dice_loss(pred, target) == pytest.approx(0.9412, abs=1e-4)


def test_dice_uniform_half() -> None:
    # constant 0.5 prediction vs all-ones 2x2 target:
    # 1 - (2*2 + 1) / (2 + 4 + 1) = 2/7
    pred = SoftMask(np.full((2, 2), 0.5))
    target = BitMask(np.ones((2, 2), dtype=bool))
    assert dice_loss(pred, target) == pytest.approx(2.0 / 7.0, abs=1e-6)


def test_dice_shape_mismatch() -> None:
    with pytest.raises(ValidationError):
        dice_loss(SoftMask(np.zeros((2, 3))), BitMask(np.zeros((2, 2), dtype=bool)))


def test_dice_decreases_towards_target() -> None:
    # moving the prediction linearly towards the target must not raise
    # the loss, and must strictly lower it end to end
    rng = np.random.default_rng(5)
    for _ in range(50):
        h = int(rng.integers(2, 10))
        w = int(rng.integers(2, 10))
        target_bits = rng.random((h, w)) < rng.uniform(0.2, 0.8)
        target = BitMask(target_bits)
        p0 = rng.random((h, w))
        t = target_bits.astype(np.float64)
        if np.array_equal(p0, t):
            continue
        steps = [0.0, 0.25, 0.5, 0.75, 1.0]
        losses = [dice_loss(SoftMask(p0 + s * (t - p0)), target) for s in steps]
        for earlier, later in zip(losses, losses[1:]):
            assert later <= earlier + 1e-12
        assert losses[-1] < losses[0]


def test_bce_loss_basics() -> None:
    target = BitMask(np.array([[1, 0]], dtype=bool))
    exact = SoftMask(np.array([[1.0, 0.0]]))
    assert bce_loss(exact, target) == pytest.approx(0.0, abs=2e-6)
    half = SoftMask(np.full((1, 2), 0.5))
    assert bce_loss(half, target) == pytest.approx(np.log(2.0), abs=1e-9)


# ---------------------------------------------------------------------------
# bounding boxes


def test_bbox_full_mask() -> None:
    box = bbox_of(BitMask(np.ones((3, 5), dtype=bool)))
    assert box.as_tuple() == (0.0, 0.0, 1.0, 1.0)


def test_bbox_single_pixel() -> None:
    bits = np.zeros((2, 2), dtype=bool)
    bits[0, 0] = True
    assert bbox_of(BitMask(bits)).as_tuple() == (0.0, 0.0, 0.5, 0.5)


def test_bbox_two_pixels() -> None:
    # pixels (i=1, j=1) and (i=2, j=3) in a 4x4 raster
    bits = np.zeros((4, 4), dtype=bool)
    bits[1, 1] = True
    bits[2, 3] = True
    assert bbox_of(BitMask(bits)).as_tuple() == (0.25, 0.25, 1.0, 0.75)


def test_bbox_empty_mask_is_error() -> None:
    with pytest.raises(ValidationError):
        bbox_of(BitMask(np.zeros((4, 4), dtype=bool)))


def test_bbox_covers_all_pixel_spans() -> None:
    rng = np.random.default_rng(17)
    for _ in range(30):
        h = int(rng.integers(1, 15))
        w = int(rng.integers(1, 15))
        bits = rng.random((h, w)) < 0.3
        if not bits.any():
            bits[int(rng.integers(h)), int(rng.integers(w))] = True
        box = bbox_of(BitMask(bits))
        for i, j in zip(*np.nonzero(bits)):
            assert box.x0 <= j / w and (j + 1) / w <= box.x1
            assert box.y0 <= i / h and (i + 1) / h <= box.y1


# ---------------------------------------------------------------------------
# misc containers


def test_pixel_at_edges() -> None:
    assert pixel_at(4, 4, 0.0, 0.0) == (0, 0)
    assert pixel_at(4, 4, 1.0, 1.0) == (3, 3)
    assert pixel_at(4, 4, 0.5, 0.25) == (1, 2)


def test_bitmask_validation() -> None:
    with pytest.raises(ValidationError):
        BitMask(np.zeros((0, 3), dtype=bool))
    with pytest.raises(ValidationError):
        BitMask(np.zeros(4, dtype=bool))


def test_softmask_validation() -> None:
    with pytest.raises(ValidationError):
        SoftMask(np.full((2, 2), 1.5))
    with pytest.raises(ValidationError):
        SoftMask(np.full((2, 2), np.nan))


def test_box_validation() -> None:
    with pytest.raises(ValidationError):
        Box(0.5, 0.0, 0.4, 1.0)
    box = Box(0.25, 0.25, 0.75, 0.5)
    assert box.contains(0.5, 0.3)
    assert not box.contains(0.5, 0.9)
    assert box.width == pytest.approx(0.5)
    assert box.height == pytest.approx(0.25)
