"""Promptable mask decoders.

The trainable point generator talks to a frozen decoder through a
narrow interface: binary labeled points in, a BitMask out.  The toy
decoder implements promptable-segmentation semantics over the synthetic
nested-region world:

  * a negative point vetoes its deepest containing region (and only
    that region; ancestors stay available),
  * each positive point selects the smallest non-vetoed region on its
    containment chain,
  * the output is the union of the selected regions' masks.

This reproduces the part/whole ambiguity of promptable decoders: points
concentrated inside a part segment the part, spread points segment the
whole, and a negative inside the part flips a concentrated prompt to
the whole.  The toy decoder is not differentiable; mask losses computed
through it contribute values but no gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence, runtime_checkable

import numpy as np

from .errors import ValidationError
from .masks import BitMask, pixel_at
from .prompts import PointPrompt
from .world import SceneSpec, region_mask, render_labelmap

LabeledPoint = tuple[float, float, int]


@runtime_checkable
class PromptableDecoder(Protocol):
    """Adapter seam for real promptable decoders."""

    @property
    def differentiable(self) -> bool: ...

    def make_context(self, scene: SceneSpec) -> object: ...

    def segment(self, context: object, points: Sequence[LabeledPoint]) -> BitMask: ...


@dataclass
class RasterContext:
    """Per-scene precomputation so repeated decodes stay cheap."""

    scene: SceneSpec
    labelmap: np.ndarray
    chains: dict[int, tuple[int, ...]]  # region id -> (self, parent, ..., root)
    _mask_cache: dict[int, BitMask] = field(default_factory=dict)

    def mask_of(self, rid: int) -> BitMask:
        if rid not in self._mask_cache:
            self._mask_cache[rid] = region_mask(self.scene, rid, self.labelmap)
        return self._mask_cache[rid]


class ToyNestedRegionDecoder:
    """Frozen rule-based decoder over synthetic scenes."""

    @property
    def differentiable(self) -> bool:
        return False

    def make_context(self, scene: SceneSpec) -> RasterContext:
        labelmap = render_labelmap(scene)
        chains = {r.id: (r.id, *scene.ancestors(r.id)) for r in scene.regions}
        return RasterContext(scene=scene, labelmap=labelmap, chains=chains)

    def _context(self, context: RasterContext | SceneSpec) -> RasterContext:
        if isinstance(context, SceneSpec):
            return self.make_context(context)
        return context

    def _deepest_region(self, ctx: RasterContext, x: float, y: float) -> int:
        i, j = pixel_at(ctx.scene.height, ctx.scene.width, x, y)
        return int(ctx.labelmap[i, j])

    def vetoed_regions(self, context: RasterContext | SceneSpec, points: Sequence[LabeledPoint]) -> set[int]:
        """Region ids knocked out by negative points."""
        ctx = self._context(context)
        out: set[int] = set()
        for x, y, label in points:
            if label == 0:
                rid = self._deepest_region(ctx, x, y)
                if rid != 0:
                    out.add(rid)
        return out

    def allowed_regions(self, context: RasterContext | SceneSpec, points: Sequence[LabeledPoint]) -> set[int]:
        """Complement of vetoed_regions over the scene's region ids."""
        ctx = self._context(context)
        return {r.id for r in ctx.scene.regions} - self.vetoed_regions(ctx, points)

    def segment(self, context: RasterContext | SceneSpec, points: Sequence[LabeledPoint]) -> BitMask:
        """Union of the smallest allowed region on each positive point's chain."""
        ctx = self._context(context)
        for x, y, label in points:
            if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
                raise ValidationError(f"point ({x}, {y}) outside the unit square")
            if label not in (0, 1):
                raise ValidationError(f"decoder labels must be binary, got {label!r}")
        vetoed = self.vetoed_regions(ctx, points)
        selected: set[int] = set()
        for x, y, label in points:
            if label != 1:
                continue
            deepest = self._deepest_region(ctx, x, y)
            if deepest == 0:
                continue
            for rid in ctx.chains[deepest]:
                if rid not in vetoed:
                    selected.add(rid)
                    break
        bits = np.zeros((ctx.scene.height, ctx.scene.width), dtype=bool)
        for rid in selected:
            bits |= ctx.mask_of(rid).bits
        return BitMask(bits)

    def segment_from_points(
        self,
        context: RasterContext | SceneSpec,
        prompt: PointPrompt,
        threshold: float = 0.5,
    ) -> BitMask:
        """Binarize a soft prompt at the threshold and segment."""
        return self.segment(self._context(context), prompt.binarized(threshold))
