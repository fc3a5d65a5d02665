"""Set matching and the composite training loss.

Predictions and pseudo-labels are matched one-to-one (pseudo-label
count E never exceeds prediction count K) by minimizing a pairwise
match cost, and the optimal assignment with the lexicographically
smallest column tuple is always returned so ties break reproducibly.

The matched loss per pair combines three terms:

    mask   DICE + per-pixel BCE between decoded and pseudo mask
    point  L1 between point coordinates (after an inner Hungarian
           alignment of the two point sets) plus BCE on point labels
    conf   BCE between prediction confidence and the candidate score

Unmatched predictions are pushed towards no-object with a BCE against
zero.  The toy decoder is not differentiable, so its mask term enters
the loss value as a constant and contributes no gradients; a
differentiable decoder adapter can supply per-pixel probabilities via
Prediction.soft_mask_t, which flips the mask term onto the autograd
path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .errors import ValidationError
from .masks import CLIP_EPS, BitMask, SoftMask, bce_loss, dice_loss
from .prompts import PointPrompt, PseudoLabel

_FEAS_TOL = 1e-9


def _tensor_from(arr: np.ndarray, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    """Copying numpy-to-torch conversion (prompt arrays are read-only)."""
    return torch.from_numpy(np.array(arr, dtype=np.float64)).to(dtype)


# ---------------------------------------------------------------------------
# assignment


def _lsa_total(cost: np.ndarray) -> float:
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum())


def hungarian(cost: np.ndarray) -> tuple[int, ...]:
    """Minimum-cost injective assignment of rows to columns.

    Input is an (E, K) matrix with E <= K.  Returns sigma with
    sigma[e] = assigned column.  Among all optimal assignments the
    lexicographically smallest tuple is returned, found by fixing
    columns row by row and verifying each prefix still reaches the
    optimal total on the remaining subproblem.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValidationError(f"cost matrix must be 2-d, got shape {cost.shape}")
    n_rows, n_cols = cost.shape
    if n_rows > n_cols:
        raise ValidationError(f"more rows than columns ({n_rows} > {n_cols}); cannot assign injectively")
    if n_rows == 0:
        return ()
    if not np.isfinite(cost).all():
        raise ValidationError("cost matrix contains non-finite entries")

    best = _lsa_total(cost)
    tol = _FEAS_TOL * max(1.0, abs(best))
    available = list(range(n_cols))
    sigma: list[int] = []
    prefix = 0.0
    for e in range(n_rows):
        rest_rows = np.arange(e + 1, n_rows)
        for k in available:
            fixed = prefix + cost[e, k]
            if rest_rows.size == 0:
                feasible = abs(fixed - best) <= tol
            else:
                rest_cols = [c for c in available if c != k]
                feasible = fixed + _lsa_total(cost[np.ix_(rest_rows, rest_cols)]) <= best + tol
            if feasible:
                sigma.append(k)
                available.remove(k)
                prefix = fixed
                break
        else:  # pragma: no cover - optimality of `best` guarantees a branch
            raise RuntimeError("no feasible column found; assignment search is inconsistent")
    return tuple(sigma)


# ---------------------------------------------------------------------------
# containers


@dataclass(frozen=True)
class LossWeights:
    lambda_mask: float = 1.0
    lambda_pt: float = 1.0
    lambda_conf: float = 1.0
    lambda_noobj: float = 1.0

    def __post_init__(self) -> None:
        for name in ("lambda_mask", "lambda_pt", "lambda_conf", "lambda_noobj"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be nonnegative")

    def to_dict(self) -> dict:
        return {
            "lambda_mask": self.lambda_mask,
            "lambda_pt": self.lambda_pt,
            "lambda_conf": self.lambda_conf,
            "lambda_noobj": self.lambda_noobj,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LossWeights":
        return cls(**{k: float(v) for k, v in data.items()})


@dataclass(eq=False)
class Prediction:
    """One query's output: decoded mask, soft point prompt, confidence.

    The tensors stay attached to the autograd graph during training;
    mask is the decoded BitMask (a constant under the toy decoder).
    soft_mask_t carries per-pixel probabilities only when a
    differentiable decoder produced them.
    """

    mask: BitMask
    xy_t: torch.Tensor  # (M, 2)
    point_labels_t: torch.Tensor  # (M,)
    confidence_t: torch.Tensor  # scalar
    soft_mask_t: torch.Tensor | None = None

    def __post_init__(self) -> None:
        if self.xy_t.ndim != 2 or self.xy_t.shape[1] != 2:
            raise ValidationError(f"xy tensor must be (M, 2), got {tuple(self.xy_t.shape)}")
        if self.point_labels_t.shape != (self.xy_t.shape[0],):
            raise ValidationError("point label tensor does not match point count")
        if self.confidence_t.ndim != 0:
            raise ValidationError("confidence must be a scalar tensor")

    @property
    def n_points(self) -> int:
        return self.xy_t.shape[0]

    @property
    def confidence(self) -> float:
        return float(self.confidence_t.detach())

    @property
    def prompt(self) -> PointPrompt:
        return PointPrompt(
            xy=self.xy_t.detach().cpu().numpy(),
            labels=self.point_labels_t.detach().cpu().numpy(),
        )

    @classmethod
    def from_arrays(
        cls,
        mask: BitMask,
        xy: np.ndarray,
        point_labels: np.ndarray,
        confidence: float,
        soft_mask: np.ndarray | None = None,
    ) -> "Prediction":
        return cls(
            mask=mask,
            xy_t=_tensor_from(xy),
            point_labels_t=_tensor_from(point_labels),
            confidence_t=torch.as_tensor(float(confidence), dtype=torch.float64),
            soft_mask_t=None if soft_mask is None else _tensor_from(soft_mask),
        )


@dataclass
class LossResult:
    total: torch.Tensor
    assignment: tuple[int, ...]
    point_alignments: tuple[tuple[int, ...], ...]
    breakdown: dict[str, float] = field(default_factory=dict)

    @property
    def value(self) -> float:
        return float(self.total.detach())


# ---------------------------------------------------------------------------
# loss terms


def bce_t(p: torch.Tensor, target: torch.Tensor | float) -> torch.Tensor:
    """Binary cross-entropy with probabilities clamped away from {0, 1}."""
    p = p.clamp(CLIP_EPS, 1.0 - CLIP_EPS)
    t = torch.as_tensor(target, dtype=p.dtype)
    return -(t * torch.log(p) + (1.0 - t) * torch.log(1.0 - p))


def point_loss_t(
    xy_t: torch.Tensor,
    point_labels_t: torch.Tensor,
    target: PointPrompt,
    alignment: tuple[int, ...] | None = None,
) -> tuple[torch.Tensor, tuple[int, ...]]:
    """Aligned L1 + label BCE between a predicted and a pseudo point set.

    The alignment maps each target point to a predicted point.  It is
    computed by a Hungarian run over detached L1 distances unless given
    (gradient checks freeze it).  The L1 term averages over all 2M
    coordinates, the BCE term over the M labels.
    """
    m = target.n_points
    if xy_t.shape[0] != m:
        raise ValidationError(f"point count mismatch: predicted {xy_t.shape[0]}, target {m}")
    if alignment is None:
        pred = xy_t.detach().cpu().numpy()
        delta = pred[None, :, :] - target.xy[:, None, :]  # (M target, M pred, 2)
        cost = np.abs(delta).sum(axis=2)
        # exact L1 ties are common (distances add up collinearly along an
        # axis), so a tiny squared-distance key picks the same pairing no
        # matter how either point set is ordered
        cost = cost + 1e-9 * (delta**2).sum(axis=2)
        rows, cols = linear_sum_assignment(cost)
        alignment = tuple(int(c) for c in cols)
    idx = torch.as_tensor(alignment, dtype=torch.long)
    target_xy = _tensor_from(target.xy, xy_t.dtype)
    target_labels = _tensor_from(target.labels, xy_t.dtype)
    l1 = (xy_t[idx] - target_xy).abs().mean()
    label_bce = bce_t(point_labels_t[idx], target_labels).mean()
    return l1 + label_bce, alignment


def point_loss(pred: PointPrompt, target: PointPrompt) -> float:
    """Float-valued point loss between two concrete prompts."""
    value, _ = point_loss_t(_tensor_from(pred.xy), _tensor_from(pred.labels), target)
    return float(value)


def _mask_terms(pred: Prediction, label: PseudoLabel) -> tuple[float, float]:
    if pred.soft_mask_t is not None:
        soft = SoftMask(pred.soft_mask_t.detach().cpu().numpy())
        return dice_loss(soft, label.mask), bce_loss(soft, label.mask)
    return dice_loss(pred.mask, label.mask), bce_loss(pred.mask, label.mask)


def _mask_terms_t(pred: Prediction, label: PseudoLabel, eps: float = 1.0) -> torch.Tensor:
    """Differentiable DICE + BCE on a soft mask tensor."""
    p = pred.soft_mask_t
    assert p is not None
    t = torch.as_tensor(label.mask.bits.astype(np.float64), dtype=p.dtype)
    if p.shape != t.shape:
        raise ValidationError(f"soft mask shape {tuple(p.shape)} does not match target {tuple(t.shape)}")
    dice = 1.0 - (2.0 * (p * t).sum() + eps) / (p.sum() + t.sum() + eps)
    return dice + bce_t(p, t).mean()


def match_cost(pred: Prediction, label: PseudoLabel, weights: LossWeights | None = None) -> float:
    """Detached pairwise cost used to build the assignment matrix."""
    w = weights or LossWeights()
    dice, mask_bce = _mask_terms(pred, label)
    pt = point_loss(pred.prompt, label.prompt)
    conf = float(bce_t(pred.confidence_t.detach(), float(label.score)))
    return w.lambda_mask * (dice + mask_bce) + w.lambda_pt * pt + w.lambda_conf * conf


def total_loss(
    preds: list[Prediction],
    labels: list[PseudoLabel],
    weights: LossWeights | None = None,
    decoder_differentiable: bool = False,
    assignment: tuple[int, ...] | None = None,
    point_alignments: tuple[tuple[int, ...], ...] | None = None,
) -> LossResult:
    """Composite set loss over one sample's predictions and candidates.

    Matched pairs contribute the weighted mask/point/confidence terms;
    every unmatched prediction contributes lambda_noobj * BCE(c, 0).
    Candidate count may be zero (pure no-object supervision) but never
    above the prediction count.
    """
    w = weights or LossWeights()
    n_preds, n_labels = len(preds), len(labels)
    if n_preds == 0:
        raise ValidationError("need at least one prediction")
    if n_labels > n_preds:
        raise ValidationError(f"{n_labels} candidates exceed {n_preds} predictions")
    for lab in labels:
        if lab.prompt.n_points != preds[0].n_points:
            raise ValidationError("pseudo-label point count does not match predictions")

    if assignment is None:
        if n_labels:
            cost = np.array([[match_cost(p, lab, w) for p in preds] for lab in labels])
            assignment = hungarian(cost)
        else:
            assignment = ()
    if len(assignment) != n_labels:
        raise ValidationError("assignment length does not match candidate count")

    dtype = preds[0].confidence_t.dtype
    total = torch.zeros((), dtype=dtype)
    mask_total = 0.0
    point_total = 0.0
    conf_total = 0.0
    alignments: list[tuple[int, ...]] = []
    for e, k in enumerate(assignment):
        pred, lab = preds[k], labels[e]
        if decoder_differentiable and pred.soft_mask_t is not None:
            soft_term = _mask_terms_t(pred, lab)
            total = total + w.lambda_mask * soft_term
            mask_total += float(soft_term.detach())
        else:
            dice, mask_bce = _mask_terms(pred, lab)
            mask_term = w.lambda_mask * (dice + mask_bce)
            total = total + torch.as_tensor(mask_term, dtype=dtype)
            mask_total += dice + mask_bce
        frozen = point_alignments[e] if point_alignments is not None else None
        pt, align = point_loss_t(pred.xy_t, pred.point_labels_t, lab.prompt, alignment=frozen)
        alignments.append(align)
        total = total + w.lambda_pt * pt
        point_total += float(pt.detach())
        conf = bce_t(pred.confidence_t, float(lab.score))
        total = total + w.lambda_conf * conf
        conf_total += float(conf.detach())

    noobj_total = 0.0
    matched = set(assignment)
    for k, pred in enumerate(preds):
        if k in matched:
            continue
        term = bce_t(pred.confidence_t, 0.0)
        total = total + w.lambda_noobj * term
        noobj_total += float(term.detach())

    return LossResult(
        total=total,
        assignment=tuple(assignment),
        point_alignments=tuple(alignments),
        breakdown={
            "mask": mask_total,
            "point": point_total,
            "conf": conf_total,
            "noobj": noobj_total,
            "total": float(total.detach()),
        },
    )
