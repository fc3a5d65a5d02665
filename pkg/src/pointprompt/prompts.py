"""Point prompt container shared by the factory, generator, and decoders.

A prompt is M normalized points with soft labels in [0, 1]: pseudo
labels use hard 0/1 values, predictions carry sigmoid outputs.  Labels
binarize at a threshold before reaching a promptable decoder, 1 for
positive (inside the target) and 0 for negative.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .masks import BitMask, decode_mask, encode_mask


@dataclass(frozen=True, eq=False)
class PointPrompt:
    xy: np.ndarray  # (M, 2), columns x then y, each in [0, 1]
    labels: np.ndarray  # (M,), values in [0, 1]

    def __post_init__(self) -> None:
        xy = np.asarray(self.xy, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.float64)
        if xy.ndim != 2 or xy.shape[1] != 2 or xy.shape[0] == 0:
            raise ValidationError(f"prompt coordinates must be (M, 2) with M >= 1, got {xy.shape}")
        if labels.shape != (xy.shape[0],):
            raise ValidationError(f"labels shape {labels.shape} does not match {xy.shape[0]} points")
        if not (np.isfinite(xy).all() and np.isfinite(labels).all()):
            raise ValidationError("prompt contains non-finite values")
        if xy.min() < 0.0 or xy.max() > 1.0 or labels.min() < 0.0 or labels.max() > 1.0:
            raise ValidationError("prompt coordinates and labels must lie in [0, 1]")
        xy = xy.copy()
        labels = labels.copy()
        xy.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "xy", xy)
        object.__setattr__(self, "labels", labels)

    @property
    def n_points(self) -> int:
        return self.xy.shape[0]

    def binarized(self, threshold: float = 0.5) -> list[tuple[float, float, int]]:
        """(x, y, 0/1) triples with labels thresholded at >= threshold."""
        return [
            (float(x), float(y), int(l >= threshold))
            for (x, y), l in zip(self.xy, self.labels)
        ]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PointPrompt):
            return NotImplemented
        return np.array_equal(self.xy, other.xy) and np.array_equal(self.labels, other.labels)

    def to_dicts(self) -> list[dict]:
        return [
            {"x": float(x), "y": float(y), "label": float(l)}
            for (x, y), l in zip(self.xy, self.labels)
        ]

    @classmethod
    def from_dicts(cls, rows: list[dict]) -> "PointPrompt":
        try:
            xy = np.array([[row["x"], row["y"]] for row in rows], dtype=np.float64)
            labels = np.array([row["label"] for row in rows], dtype=np.float64)
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed point rows: {exc}") from exc
        return cls(xy=xy, labels=labels)


@dataclass(frozen=True, eq=False)
class PseudoLabel:
    """One candidate referent: mask, prompt points, and score hat-c.

    The score is 1.0 for a known referent, 0.0 for context candidates
    awaiting selection.
    """

    mask: BitMask
    prompt: PointPrompt
    score: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.score <= 1.0):
            raise ValidationError(f"candidate score must lie in [0, 1], got {self.score}")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PseudoLabel):
            return NotImplemented
        return self.mask == other.mask and self.prompt == other.prompt and self.score == other.score

    def to_dict(self) -> dict:
        return {
            "mask": encode_mask(self.mask),
            "points": self.prompt.to_dicts(),
            "score": float(self.score),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PseudoLabel":
        try:
            return cls(
                mask=decode_mask(data["mask"]),
                prompt=PointPrompt.from_dicts(data["points"]),
                score=float(data["score"]),
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed candidate dict: {exc}") from exc
