"""Binary/soft mask containers, run-length codec, and overlap metrics.

Masks are row-major rasters of shape (H, W).  Normalized point
coordinates (x, y) live in [0, 1]^2 with x horizontal: pixel (i, j)
covers the square [j/W, (j+1)/W] x [i/H, (i+1)/H].

Run-length strings have the form "W H c1 c2 ..." where the counts
alternate starting with a run of zeros, scanning row-major.  A mask
that begins with a foreground pixel therefore starts with "0".  Counts
must sum to W*H exactly; only the leading count may be zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


# ---------------------------------------------------------------------------
# containers


@dataclass(frozen=True, eq=False)
class BitMask:
    """Immutable binary raster of shape (H, W)."""

    bits: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.bits)
        if arr.ndim != 2 or arr.size == 0:
            raise ValidationError(f"mask must be a non-empty 2-d array, got shape {arr.shape}")
        arr = arr.astype(bool).copy()
        arr.setflags(write=False)
        object.__setattr__(self, "bits", arr)

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def area(self) -> int:
        return int(self.bits.sum())

    def is_empty(self) -> bool:
        return not self.bits.any()

    def contains_point(self, x: float, y: float) -> bool:
        """Membership of the pixel under normalized point (x, y)."""
        i, j = pixel_at(self.height, self.width, x, y)
        return bool(self.bits[i, j])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BitMask):
            return NotImplemented
        return self.bits.shape == other.bits.shape and bool(np.array_equal(self.bits, other.bits))

    def __hash__(self) -> int:
        return hash((self.bits.shape, self.bits.tobytes()))

    def __repr__(self) -> str:
        return f"BitMask({self.width}x{self.height}, area={self.area})"


@dataclass(frozen=True, eq=False)
class SoftMask:
    """Raster of foreground probabilities in [0, 1], shape (H, W)."""

    values: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 2 or arr.size == 0:
            raise ValidationError(f"soft mask must be a non-empty 2-d array, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValidationError("soft mask contains non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValidationError("soft mask values must lie in [0, 1]")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @classmethod
    def from_bitmask(cls, mask: BitMask) -> "SoftMask":
        return cls(mask.bits.astype(np.float64))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def threshold(self, tau: float = 0.5) -> BitMask:
        return BitMask(self.values >= tau)


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in normalized coordinates, x0 <= x1 and y0 <= y1."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.x0 <= self.x1 <= 1.0 and 0.0 <= self.y0 <= self.y1 <= 1.0):
            raise ValidationError(f"degenerate box {(self.x0, self.y0, self.x1, self.y1)}")

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    def contains(self, x: float, y: float) -> bool:
        return self.x0 <= x <= self.x1 and self.y0 <= y <= self.y1

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x0, self.y0, self.x1, self.y1)


def pixel_at(height: int, width: int, x: float, y: float) -> tuple[int, int]:
    """Row/column of the pixel whose cell contains normalized (x, y).

    Coordinates exactly on the far edge (x == 1.0) map to the last
    column/row rather than falling off the raster.
    """
    j = min(max(int(np.floor(x * width)), 0), width - 1)
    i = min(max(int(np.floor(y * height)), 0), height - 1)
    return i, j


# ---------------------------------------------------------------------------
# run-length codec


def encode_mask(mask: BitMask) -> str:
    """Encode a BitMask as "W H c1 c2 ..." with a leading zero-run count."""
    flat = mask.bits.ravel()
    counts: list[int] = []
    current = False  # runs alternate starting from zeros
    run = 0
    for v in flat:
        if bool(v) == current:
            run += 1
        else:
            counts.append(run)
            current = bool(v)
            run = 1
    counts.append(run)
    return " ".join(str(c) for c in [mask.width, mask.height] + counts)


def decode_mask(rle: str) -> BitMask:
    """Inverse of encode_mask.  Malformed strings raise ValidationError."""
    parts = rle.split()
    if len(parts) < 3:
        raise ValidationError(f"run-length string too short: {rle!r}")
    try:
        numbers = [int(p) for p in parts]
    except ValueError as exc:
        raise ValidationError(f"non-integer token in run-length string: {rle!r}") from exc
    width, height, counts = numbers[0], numbers[1], numbers[2:]
    if width < 1 or height < 1:
        raise ValidationError(f"bad raster dimensions {width}x{height}")
    if any(c < 0 for c in counts):
        raise ValidationError("negative run count")
    if any(c == 0 for c in counts[1:]):
        raise ValidationError("only the leading run count may be zero")
    if sum(counts) != width * height:
        raise ValidationError(f"run counts sum to {sum(counts)}, expected {width * height}")
    flat = np.zeros(width * height, dtype=bool)
    pos = 0
    value = False
    for c in counts:
        if value:
            flat[pos : pos + c] = True
        pos += c
        value = not value
    return BitMask(flat.reshape(height, width))


# ---------------------------------------------------------------------------
# overlap metrics


def _check_same_shape(a, b) -> None:
    if (a.height, a.width) != (b.height, b.width):
        raise ValidationError(
            f"shape mismatch: {a.width}x{a.height} vs {b.width}x{b.height}"
        )


def iou(a: BitMask, b: BitMask) -> float:
    """Intersection over union.  Two empty masks agree perfectly: 1.0."""
    _check_same_shape(a, b)
    inter = int(np.logical_and(a.bits, b.bits).sum())
    union = int(np.logical_or(a.bits, b.bits).sum())
    if union == 0:
        return 1.0
    return inter / union

def dice_loss(pred: SoftMask | BitMask, target: BitMask, eps: float = 1.0) -> float:
    """Smoothed DICE loss, 1 - (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps)."""
    if isinstance(pred, BitMask):
        pred = SoftMask.from_bitmask(pred)
    _check_same_shape(pred, target)
    p = pred.values
    t = target.bits.astype(np.float64)
    num = 2.0 * float((p * t).sum()) + eps
    den = float(p.sum()) + float(t.sum()) + eps
    return 1.0 - num / den


#: probabilities are clipped to [CLIP_EPS, 1 - CLIP_EPS] inside every
#: cross-entropy in the package so that saturated predictions stay finite.
CLIP_EPS = 1e-6


def bce_loss(pred: SoftMask | BitMask, target: BitMask) -> float:
    """Mean per-pixel binary cross-entropy with clipped probabilities."""
    if isinstance(pred, BitMask):
        pred = SoftMask.from_bitmask(pred)
    _check_same_shape(pred, target)
    p = np.clip(pred.values, CLIP_EPS, 1.0 - CLIP_EPS)
    t = target.bits.astype(np.float64)
    return float(-(t * np.log(p) + (1.0 - t) * np.log(1.0 - p)).mean())


def bbox_of(mask: BitMask) -> Box:
    """Tight normalized bounding box of the foreground pixels.

    Pixel (i, j) contributes the square [j/W, (j+1)/W] x [i/H, (i+1)/H],
    so a single-pixel mask yields a box of positive extent.
    """
    rows, cols = np.nonzero(mask.bits)
    if rows.size == 0:
        raise ValidationError("bounding box of an empty mask is undefined")
    h, w = mask.height, mask.width
    return Box(
        x0=cols.min() / w,
        y0=rows.min() / h,
        x1=(cols.max() + 1) / w,
        y1=(rows.max() + 1) / h,
    )
