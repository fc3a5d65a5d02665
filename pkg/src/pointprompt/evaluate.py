"""Referent inference and IoU-based metrics.

At test time the generator proposes K candidate referents; we keep the one
with the highest confidence and score its decoded mask against the reference
mask.  Aggregate quality is mean IoU plus precision at fixed IoU thresholds,
broken down per data source.  Reports carry no timestamps or environment
info, so evaluating the same checkpoint on the same manifest twice yields
byte-identical JSON.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

from .errors import ValidationError
from .factory import Sample
from .generator import PointGenerator
from .masks import BitMask, iou
from .matching import Prediction
from .prompts import PointPrompt
from .world import Expression, SceneSpec, render_labelmap

# IoU thresholds for the precision@t columns.
THRESHOLDS = (0.3, 0.5, 0.7)


# ---------------------------------------------------------------------------
# inference


def infer_prediction(
    generator: PointGenerator,
    scene: SceneSpec,
    expression: Expression,
    features: dict | None = None,
    context: object | None = None,
) -> Prediction:
    """Run the generator and keep the most confident prediction.

    Confidence ties break toward the lowest query index, so inference is a
    pure function of the parameters and the input.
    """
    with torch.no_grad():
        preds = generator.forward(scene, expression, features=features, context=context)
    confidences = np.array([p.confidence for p in preds])
    return preds[int(np.argmax(confidences))]


def infer(
    generator: PointGenerator,
    scene: SceneSpec,
    expression: Expression,
    features: dict | None = None,
    context: object | None = None,
) -> BitMask:
    """Segment the referent of ``expression`` in ``scene``."""
    return infer_prediction(generator, scene, expression, features, context).mask


# ---------------------------------------------------------------------------
# metrics


def _check_metric_block(block: dict, label: str) -> None:
    if not (0.0 <= block["miou"] <= 1.0):
        raise ValidationError(f"{label}: miou {block['miou']} outside [0, 1]")
    if block["n_samples"] < 1:
        raise ValidationError(f"{label}: n_samples must be positive")
    keys = [f"{t}" for t in THRESHOLDS]
    if sorted(block["precision_at"]) != sorted(keys):
        raise ValidationError(f"{label}: precision table must have keys {keys}")
    values = [block["precision_at"][k] for k in keys]
    for v in values:
        if not (0.0 <= v <= 1.0):
            raise ValidationError(f"{label}: precision {v} outside [0, 1]")
    # a hit at a high threshold is also a hit at every lower one
    for lo, hi in zip(values, values[1:]):
        if hi > lo + 1e-12:
            raise ValidationError(f"{label}: precision must not increase with the threshold")


@dataclass(frozen=True)
class MetricsReport:
    """Evaluation summary over one manifest.

    precision_at maps threshold strings ("0.3", "0.5", "0.7") to the fraction
    of samples whose IoU strictly exceeds that threshold.  per_source holds
    the same three numbers restricted to each data source, per_sample the raw
    IoU keyed by sample id.
    """

    miou: float
    precision_at: dict
    n_samples: int
    per_source: dict
    per_sample: dict

    def __post_init__(self) -> None:
        _check_metric_block(
            {"miou": self.miou, "n_samples": self.n_samples, "precision_at": self.precision_at},
            "report",
        )
        if self.n_samples != len(self.per_sample):
            raise ValidationError("n_samples does not match the per-sample table")
        if sum(b["n_samples"] for b in self.per_source.values()) != self.n_samples:
            raise ValidationError("per-source sample counts do not add up")
        for source, block in self.per_source.items():
            _check_metric_block(block, f"source {source!r}")
        for sid, value in self.per_sample.items():
            if not (0.0 <= value <= 1.0):
                raise ValidationError(f"sample {sid!r}: IoU {value} outside [0, 1]")

    def to_dict(self) -> dict:
        return {
            "miou": self.miou,
            "precision_at": dict(self.precision_at),
            "n_samples": self.n_samples,
            "per_source": {s: dict(b, precision_at=dict(b["precision_at"])) for s, b in self.per_source.items()},
            "per_sample": dict(self.per_sample),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MetricsReport":
        expected = {"miou", "precision_at", "n_samples", "per_source", "per_sample"}
        if set(data) != expected:
            raise ValidationError(f"report must have exactly the keys {sorted(expected)}")
        return cls(
            miou=float(data["miou"]),
            precision_at={k: float(v) for k, v in data["precision_at"].items()},
            n_samples=int(data["n_samples"]),
            per_source={s: dict(b) for s, b in data["per_source"].items()},
            per_sample={k: float(v) for k, v in data["per_sample"].items()},
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls.from_dict(json.loads(text))


def _summarize(ious: np.ndarray) -> dict:
    return {
        "miou": float(ious.mean()),
        "precision_at": {f"{t}": float((ious > t).mean()) for t in THRESHOLDS},
        "n_samples": int(ious.size),
    }


def evaluate(generator: PointGenerator, samples: list[Sample]) -> MetricsReport:
    """Score the generator's referent masks against the reference masks.

    Every sample must carry a reference mask.  All reductions run in sorted
    sample-id order, so the report does not depend on manifest row order.
    """
    if not samples:
        raise ValidationError("cannot evaluate an empty sample list")
    per_sample: dict[str, float] = {}
    source_of: dict[str, str] = {}
    for sample in samples:
        if sample.gt_mask is None:
            raise ValidationError(f"sample {sample.sample_id!r} has no reference mask")
        if sample.sample_id in per_sample:
            raise ValidationError(f"duplicate sample id {sample.sample_id!r}")
        predicted = infer(generator, sample.scene, sample.expression)
        per_sample[sample.sample_id] = iou(predicted, sample.gt_mask)
        source_of[sample.sample_id] = sample.source

    order = sorted(per_sample)
    ious = np.array([per_sample[sid] for sid in order])
    per_source = {}
    for source in sorted(set(source_of.values())):
        mask = np.array([source_of[sid] == source for sid in order])
        per_source[source] = _summarize(ious[mask])
    overall = _summarize(ious)
    return MetricsReport(
        miou=overall["miou"],
        precision_at=overall["precision_at"],
        n_samples=overall["n_samples"],
        per_source=per_source,
        per_sample=per_sample,
    )


# ---------------------------------------------------------------------------
# overlays


def _gray_base(scene: SceneSpec) -> np.ndarray:
    """Labelmap as a gray ramp: background dark, deeper region ids lighter."""
    labelmap = render_labelmap(scene)
    top = int(labelmap.max())
    gray = np.full(labelmap.shape, 40, dtype=np.uint8)
    for rid in range(1, top + 1):
        level = 90 + (110 * (rid - 1)) // max(top - 1, 1)
        gray[labelmap == rid] = level
    return gray


def write_overlay(
    path: str,
    scene: SceneSpec,
    pred_mask: BitMask | None = None,
    gt_mask: BitMask | None = None,
    prompt: PointPrompt | None = None,
    scale: int = 8,
) -> None:
    """Write a PNG visualization of a prediction.

    The scene renders as grays, the predicted mask as a red tint, the
    reference mask as a green contour, and prompt points as white (positive)
    or black (negative) squares.  Purely a file emitter; nothing reads these
    images back.
    """
    if scale < 1:
        raise ValidationError("overlay scale must be at least 1")
    gray = _gray_base(scene)
    h, w = gray.shape
    rgb = np.stack([gray, gray, gray], axis=-1)
    if pred_mask is not None:
        if pred_mask.bits.shape != (h, w):
            raise ValidationError("predicted mask shape does not match the scene raster")
        rgb[pred_mask.bits] = (220, 80, 60)
    if gt_mask is not None:
        if gt_mask.bits.shape != (h, w):
            raise ValidationError("reference mask shape does not match the scene raster")
        interior = ndimage.binary_erosion(gt_mask.bits)
        contour = gt_mask.bits & ~interior
        rgb[contour] = (40, 220, 80)
    up = np.kron(rgb, np.ones((scale, scale, 1), dtype=np.uint8))
    if prompt is not None:
        half = max(1, scale // 4)
        for (x, y), label in zip(prompt.xy, prompt.labels):
            col = min(int(x * w * scale), w * scale - 1)
            row = min(int(y * h * scale), h * scale - 1)
            color = (255, 255, 255) if label >= 0.5 else (0, 0, 0)
            r0, r1 = max(row - half, 0), min(row + half + 1, h * scale)
            c0, c1 = max(col - half, 0), min(col + half + 1, w * scale)
            up[r0:r1, c0:c1] = color
    Image.fromarray(up, mode="RGB").save(path, format="PNG")
