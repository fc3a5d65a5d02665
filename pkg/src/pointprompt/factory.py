"""Pseudo-label construction for every training source.

Four sources feed the curriculum:

    D_sem   object-centric scenes, one candidate, score 1
    D_ref   synthesized multi-object scenes from mosaic composition
            (absolute-position text) or embedding fusion (relative-
            relation text); the designated referent scores 1, every
            other candidate 0
    H_sem   target-domain expressions with a single candidate, score 1
    H_ref   target-domain expressions with several candidates, all 0
            until the Select step picks one

Prompt geometry invariant, enforced everywhere (including after affine
remaps): every point lies inside the candidate mask's bounding box,
positives lie on the mask, negatives lie in the box but off the mask,
each prompt has at least one positive, and at least one negative
whenever the box is not fully covered by the mask.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .errors import InfeasibleError, ValidationError
from .masks import BitMask, bbox_of, decode_mask, encode_mask
from .prompts import PointPrompt, PseudoLabel
from .world import (
    Expression,
    Region,
    SceneSpec,
    Shape,
    WorldParams,
    flip_scene,
    generate_scene,
    parse_class_token,
    parse_expression,
    realize_expression,
    region_mask,
    render_labelmap,
    scene_from_dict,
    scene_to_dict,
)

SOURCES = ("D_sem", "D_ref", "H_sem", "H_ref", "eval")


# ---------------------------------------------------------------------------
# sample container and manifests


@dataclass
class Sample:
    sample_id: str
    source: str
    scene: SceneSpec
    expression: Expression
    candidates: list[PseudoLabel]
    gt_referent_id: int | None = None
    gt_mask: BitMask | None = None

    def __post_init__(self) -> None:
        if self.source not in SOURCES:
            raise ValidationError(f"unknown sample source {self.source!r}")
        if not self.candidates:
            raise ValidationError("sample needs at least one candidate")
        counts = {c.prompt.n_points for c in self.candidates}
        if len(counts) != 1:
            raise ValidationError(f"candidates disagree on point count: {sorted(counts)}")

    @property
    def n_candidates(self) -> int:
        return len(self.candidates)

    def to_dict(self) -> dict:
        row = {
            "id": self.sample_id,
            "source": self.source,
            "scene": scene_to_dict(self.scene),
            "expression": {"tokens": list(self.expression.tokens), "kind": self.expression.kind},
            "candidates": [c.to_dict() for c in self.candidates],
        }
        if self.gt_referent_id is not None or self.gt_mask is not None:
            row["gt"] = {
                "referent_id": self.gt_referent_id,
                "mask": None if self.gt_mask is None else encode_mask(self.gt_mask),
            }
        return row

    @classmethod
    def from_dict(cls, row: dict) -> "Sample":
        try:
            gt = row.get("gt") or {}
            return cls(
                sample_id=str(row["id"]),
                source=str(row["source"]),
                scene=scene_from_dict(row["scene"]),
                expression=Expression(
                    tokens=tuple(row["expression"]["tokens"]),
                    kind=str(row["expression"]["kind"]),
                ),
                candidates=[PseudoLabel.from_dict(c) for c in row["candidates"]],
                gt_referent_id=gt.get("referent_id"),
                gt_mask=None if gt.get("mask") is None else decode_mask(gt["mask"]),
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed sample row: {exc}") from exc


def write_manifest(samples: list[Sample], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for sample in samples:
            fh.write(json.dumps(sample.to_dict(), sort_keys=True) + "\n")


def read_manifest(path: str) -> list[Sample]:
    samples = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{line_no}: invalid JSON: {exc}") from exc
            samples.append(Sample.from_dict(row))
    return samples


# ---------------------------------------------------------------------------
# prompt geometry


def _pixel_center(i: int, j: int, height: int, width: int) -> tuple[float, float]:
    return (j + 0.5) / width, (i + 0.5) / height


def _nearest_pixel(bits: np.ndarray, x: float, y: float, height: int, width: int) -> tuple[float, float]:
    """Center of the set pixel whose center is nearest to (x, y)."""
    rows, cols = np.nonzero(bits)
    cx = (cols + 0.5) / width
    cy = (rows + 0.5) / height
    idx = int(np.argmin((cx - x) ** 2 + (cy - y) ** 2))
    return float(cx[idx]), float(cy[idx])


def _exterior_bits(mask: BitMask) -> np.ndarray:
    """Pixels inside the mask's bbox but off the mask."""
    rows, cols = np.nonzero(mask.bits)
    box = np.zeros_like(mask.bits)
    box[rows.min() : rows.max() + 1, cols.min() : cols.max() + 1] = True
    return box & ~mask.bits


def _boundary_exterior_pixel(mask: BitMask) -> tuple[float, float]:
    """Center of the exterior pixel closest to the mask boundary."""
    exterior = _exterior_bits(mask)
    dist = ndimage.distance_transform_edt(~mask.bits)
    dist = np.where(exterior, dist, np.inf)
    i, j = np.unravel_index(int(np.argmin(dist)), dist.shape)
    return _pixel_center(int(i), int(j), mask.height, mask.width)


def _centroid_mask_pixel(mask: BitMask) -> tuple[float, float]:
    rows, cols = np.nonzero(mask.bits)
    cx = float((cols + 0.5).mean()) / mask.width
    cy = float((rows + 0.5).mean()) / mask.height
    return _nearest_pixel(mask.bits, cx, cy, mask.height, mask.width)


def check_prompt_geometry(label: PseudoLabel) -> list[str]:
    """All violations of the prompt geometry invariant (empty if clean)."""
    violations: list[str] = []
    if label.mask.is_empty():
        return ["candidate mask is empty"]
    box = bbox_of(label.mask)
    has_positive = False
    has_negative = False
    for (x, y), raw in zip(label.prompt.xy, label.prompt.labels):
        positive = raw >= 0.5
        if not box.contains(x, y):
            violations.append(f"point ({x:.4f}, {y:.4f}) outside bbox {box.as_tuple()}")
        on_mask = label.mask.contains_point(x, y)
        if positive and not on_mask:
            violations.append(f"positive point ({x:.4f}, {y:.4f}) off the mask")
        if not positive and on_mask:
            violations.append(f"negative point ({x:.4f}, {y:.4f}) on the mask")
        has_positive = has_positive or positive
        has_negative = has_negative or not positive
    if not has_positive:
        violations.append("no positive point")
    if _exterior_bits(label.mask).any() and not has_negative:
        violations.append("bbox has exterior pixels but no negative point")
    return violations


def repair_prompt(mask: BitMask, xy: np.ndarray) -> PointPrompt:
    """Relabel and minimally move points so the geometry invariant holds.

    Used after affine remaps, where boundary rounding can strand a point
    off its mask.  Labels are recomputed from raster membership; stray
    points snap to the nearest valid pixel center.
    """
    if mask.is_empty():
        raise ValidationError("cannot repair a prompt against an empty mask")
    box = bbox_of(mask)
    exterior = _exterior_bits(mask)
    has_exterior = bool(exterior.any())
    points: list[tuple[float, float, float]] = []
    for x, y in np.asarray(xy, dtype=np.float64):
        x = float(min(max(x, 0.0), 1.0))
        y = float(min(max(y, 0.0), 1.0))
        if mask.contains_point(x, y):
            points.append((x, y, 1.0))
        elif box.contains(x, y):
            points.append((x, y, 0.0))
        elif has_exterior:
            sx, sy = _nearest_pixel(exterior, x, y, mask.height, mask.width)
            points.append((sx, sy, 0.0))
        else:
            sx, sy = _nearest_pixel(mask.bits, x, y, mask.height, mask.width)
            points.append((sx, sy, 1.0))
    if not any(l == 1.0 for _, _, l in points):
        points[0] = (*_centroid_mask_pixel(mask), 1.0)
    if has_exterior and all(l == 1.0 for _, _, l in points):
        points[-1] = (*_boundary_exterior_pixel(mask), 0.0)
    return PointPrompt(
        xy=np.array([[x, y] for x, y, _ in points]),
        labels=np.array([l for _, _, l in points]),
    )


def sample_prompt_points(mask: BitMask, n_points: int, seed: int) -> PointPrompt:
    """Spread n_points over the mask's bbox by jittered grid sampling.

    Points land in distinct cells of a ceil(sqrt(M))-square grid over
    the bbox, uniform inside their cell.  Resamples until the prompt has
    a positive and (when the bbox is not fully masked) a negative; after
    64 attempts, deterministic fallbacks place a positive at the
    mask pixel nearest the mask centroid and a negative at the exterior
    pixel nearest the mask boundary.
    """
    if n_points < 2:
        raise ValidationError("prompts need at least two points")
    if mask.is_empty():
        raise ValidationError("cannot sample prompt points for an empty mask")
    box = bbox_of(mask)
    grid = math.ceil(math.sqrt(n_points))
    has_exterior = bool(_exterior_bits(mask).any())
    rng = np.random.default_rng(seed)
    xy = np.zeros((n_points, 2))
    labels = np.zeros(n_points)
    for _ in range(64):
        cells = rng.permutation(grid * grid)[:n_points]
        for idx, cell in enumerate(cells):
            ci, cj = divmod(int(cell), grid)
            x = box.x0 + (cj + rng.uniform()) / grid * box.width
            y = box.y0 + (ci + rng.uniform()) / grid * box.height
            xy[idx] = (x, y)
            labels[idx] = 1.0 if mask.contains_point(x, y) else 0.0
        if labels.max() == 1.0 and (not has_exterior or labels.min() == 0.0):
            return PointPrompt(xy=xy.copy(), labels=labels.copy())
    # deterministic fallback
    if labels.max() == 0.0:
        xy[0] = _centroid_mask_pixel(mask)
        labels[0] = 1.0
    if has_exterior and labels.min() == 1.0:
        xy[-1] = _boundary_exterior_pixel(mask)
        labels[-1] = 0.0
    return PointPrompt(xy=xy.copy(), labels=labels.copy())


# ---------------------------------------------------------------------------
# source builders


def _dominant_region(scene: SceneSpec) -> Region:
    tops = scene.top_level()
    if len(tops) != 1:
        raise ValidationError(f"object-centric scene must have exactly one top-level region, found {len(tops)}")
    return tops[0]


def build_semantic_sample(scene: SceneSpec, n_points: int, seed: int, sample_id: str = "") -> Sample:
    """Object-centric sample: one candidate with score 1, class text.

    A seeded coin decides a horizontal flip before anything is derived,
    the only augmentation in the pipeline.
    """
    rng = np.random.default_rng(seed)
    if rng.random() < 0.5:
        scene = flip_scene(scene)
    region = _dominant_region(scene)
    mask = region_mask(scene, region.id)
    prompt = sample_prompt_points(mask, n_points, int(rng.integers(2**31)))
    expression = realize_expression(scene, region.id, "class")
    return Sample(
        sample_id=sample_id or f"dsem-{seed}",
        source="D_sem",
        scene=scene,
        expression=expression,
        candidates=[PseudoLabel(mask=mask, prompt=prompt, score=1.0)],
        gt_referent_id=region.id,
        gt_mask=mask,
    )


@dataclass(frozen=True)
class TileTransform:
    """Affine placement of unit-square content into a tile.

    (x, y) maps to (origin + (offset + p * scale) * extent) per axis;
    content keeps one scale factor so shapes stay shapes.
    """

    origin_x: float
    origin_y: float
    tile_w: float
    tile_h: float
    scale: float
    offset_x: float
    offset_y: float

    def apply(self, x: float, y: float) -> tuple[float, float]:
        return (
            self.origin_x + (self.offset_x + x * self.scale) * self.tile_w,
            self.origin_y + (self.offset_y + y * self.scale) * self.tile_h,
        )

    def apply_shape(self, shape: Shape) -> Shape:
        cx, cy = self.apply(shape.cx, shape.cy)
        return Shape(
            kind=shape.kind,
            cx=cx,
            cy=cy,
            rx=shape.rx * self.scale * self.tile_w,
            ry=shape.ry * self.scale * self.tile_h,
        )


def _remap_regions(
    scenes: list[SceneSpec],
    transforms: list[TileTransform],
    parents: list[int | None],
    start_id: int = 1,
) -> tuple[tuple[Region, ...], list[int]]:
    """Transform each scene's regions into a shared id space.

    New ids count up from start_id (callers pass one past any ids they
    already hold so graft parents can never collide).  parents[i]
    optionally grafts scene i's root onto an existing region id.
    Returns the combined region tuple plus each scene's new root id.
    """
    combined: list[Region] = []
    roots: list[int] = []
    next_id = start_id
    for scene, transform, graft in zip(scenes, transforms, parents):
        id_map: dict[int, int] = {}
        for region in scene.regions:
            id_map[region.id] = next_id
            next_id += 1
        for region in scene.regions:
            parent = id_map[region.parent] if region.parent is not None else graft
            combined.append(
                Region(
                    id=id_map[region.id],
                    class_id=region.class_id,
                    shape=transform.apply_shape(region.shape),
                    parent=parent,
                )
            )
        roots.append(id_map[_dominant_region(scene).id])
    return tuple(combined), roots


def _check_distinct_classes(samples: list[Sample]) -> None:
    seen: set[int] = set()
    for sample in samples:
        classes = {r.class_id for r in sample.scene.regions}
        if classes & seen:
            raise ValidationError(f"input scenes share classes {sorted(classes & seen)}")
        seen |= classes


def compose_mosaic(samples: list[Sample], seed: int, sample_id: str = "") -> Sample:
    """Tile 2 or 4 object-centric samples into one multi-object scene.

    Layouts are 1x2 or 2x2; per-tile content is jittered with a scale
    in [0.8, 1.0] and a uniform offset.  One tile becomes the referent
    (score 1) and gets an absolute-position expression; the other tiles
    turn into score-0 context candidates.  Prompts ride along through
    the affine remap and are then repaired against the re-rasterized
    masks.
    """
    if len(samples) not in (2, 4):
        raise ValidationError(f"mosaic needs 2 or 4 tiles, got {len(samples)}")
    for sample in samples:
        if sample.source != "D_sem":
            raise ValidationError("mosaic inputs must be object-centric (D_sem) samples")
    _check_distinct_classes(samples)
    first = samples[0].scene
    if any(s.scene.width != first.width or s.scene.height != first.height for s in samples):
        raise ValidationError("mosaic inputs must share raster dimensions")

    rng = np.random.default_rng(seed)
    if len(samples) == 2:
        tiles = [(0.0, 0.0, 0.5, 1.0), (0.5, 0.0, 0.5, 1.0)]
    else:
        tiles = [(0.0, 0.0, 0.5, 0.5), (0.5, 0.0, 0.5, 0.5), (0.0, 0.5, 0.5, 0.5), (0.5, 0.5, 0.5, 0.5)]
    order = [int(i) for i in rng.permutation(len(samples))]
    transforms = []
    for tx, ty, tw, th in tiles:
        scale = float(rng.uniform(0.8, 1.0))
        transforms.append(
            TileTransform(
                origin_x=tx,
                origin_y=ty,
                tile_w=tw,
                tile_h=th,
                scale=scale,
                offset_x=float(rng.uniform(0.0, 1.0 - scale)),
                offset_y=float(rng.uniform(0.0, 1.0 - scale)),
            )
        )
    referent_tile = int(rng.integers(len(tiles)))

    tile_scenes = [samples[i].scene for i in order]
    regions, roots = _remap_regions(tile_scenes, transforms, [None] * len(tiles))
    composed = SceneSpec(width=first.width, height=first.height, regions=regions, seed=seed)
    labelmap = render_labelmap(composed)

    candidates = []
    for t in range(len(tiles)):
        mask = region_mask(composed, roots[t], labelmap)
        source_prompt = samples[order[t]].candidates[0].prompt
        remapped = np.array([transforms[t].apply(x, y) for x, y in source_prompt.xy])
        prompt = repair_prompt(mask, remapped)
        candidates.append(
            PseudoLabel(mask=mask, prompt=prompt, score=1.0 if t == referent_tile else 0.0)
        )
    expression = realize_expression(composed, roots[referent_tile], "absolute", rng=rng)
    return Sample(
        sample_id=sample_id or f"dref-mosaic-{seed}",
        source="D_ref",
        scene=composed,
        expression=expression,
        candidates=candidates,
        gt_referent_id=roots[referent_tile],
        gt_mask=candidates[referent_tile].mask,
    )


def fuse_embed(host: Sample, guest: Sample, seed: int, mode: str | None = None, sample_id: str = "") -> Sample:
    """Fuse two object-centric samples into one relative-relation scene.

    Inside mode shrinks the guest into the host region and grafts it as
    a child; the guest is the referent ("the G inside the H").  Beside
    mode re-places both objects as scaled, disjoint frames on a fresh
    canvas with a clear directional offset, and either object may be
    the referent.  Placement retries are bounded; an impossible layout
    raises InfeasibleError.
    """
    for sample in (host, guest):
        if sample.source != "D_sem":
            raise ValidationError("fusion inputs must be object-centric (D_sem) samples")
    _check_distinct_classes([host, guest])
    if host.scene.width != guest.scene.width or host.scene.height != guest.scene.height:
        raise ValidationError("fusion inputs must share raster dimensions")
    if mode not in (None, "inside", "beside"):
        raise ValidationError(f"unknown fusion mode {mode!r}")

    rng = np.random.default_rng(seed)
    picked_mode = mode or ("inside" if rng.random() < 0.4 else "beside")
    host_root = _dominant_region(host.scene)
    guest_root = _dominant_region(guest.scene)
    width, height = host.scene.width, host.scene.height
    min_rx = 1.5 / width
    min_ry = 1.5 / height

    def frame_transform(origin_x: float, origin_y: float, scale: float) -> TileTransform:
        return TileTransform(
            origin_x=origin_x, origin_y=origin_y, tile_w=1.0, tile_h=1.0,
            scale=scale, offset_x=0.0, offset_y=0.0,
        )

    if picked_mode == "inside":
        hx0, hy0, hx1, hy1 = _shrunk_inner_box(host_root.shape, 0.75)
        ibw, ibh = hx1 - hx0, hy1 - hy0
        child_bounds = [c.shape.bounds() for c in host.scene.children_of(host_root.id)]
        guest_transform: TileTransform | None = None
        for _ in range(64):
            scale = float(rng.uniform(0.5, 0.8))
            cand = TileTransform(
                origin_x=hx0,
                origin_y=hy0,
                tile_w=ibw,
                tile_h=ibh,
                scale=scale,
                offset_x=float(rng.uniform(0.0, 1.0 - scale)),
                offset_y=float(rng.uniform(0.0, 1.0 - scale)),
            )
            mapped = cand.apply_shape(guest_root.shape)
            if mapped.rx < min_rx or mapped.ry < min_ry:
                continue
            if all(_bounds_disjoint(mapped.bounds(), cb, 0.01) for cb in child_bounds):
                guest_transform = cand
                break
        if guest_transform is None:
            raise InfeasibleError("no room inside the host region for the guest")
        # host keeps its geometry; only the guest subtree is remapped
        host_ids = {r.id for r in host.scene.regions}
        guest_regions, guest_roots = _remap_regions(
            [guest.scene], [guest_transform], [host_root.id], start_id=max(host_ids) + 1
        )
        regions = tuple(host.scene.regions) + guest_regions
        host_new_root = host_root.id
        guest_new_root = guest_roots[0]
        transforms: dict[int, TileTransform | None] = {
            host_new_root: None,
            guest_new_root: guest_transform,
        }
    else:
        placed: tuple[TileTransform, TileTransform] | None = None
        for _ in range(64):
            host_scale = float(rng.uniform(0.4, 0.55))
            guest_scale = float(rng.uniform(0.3, min(0.45, 0.92 - host_scale)))
            t_host = frame_transform(
                float(rng.uniform(0.02, 0.98 - host_scale)),
                float(rng.uniform(0.02, 0.98 - host_scale)),
                host_scale,
            )
            t_guest = frame_transform(
                float(rng.uniform(0.02, 0.98 - guest_scale)),
                float(rng.uniform(0.02, 0.98 - guest_scale)),
                guest_scale,
            )
            mapped_host = t_host.apply_shape(host_root.shape)
            mapped_guest = t_guest.apply_shape(guest_root.shape)
            if min(mapped_host.rx, mapped_guest.rx) < min_rx or min(mapped_host.ry, mapped_guest.ry) < min_ry:
                continue
            host_frame = (t_host.origin_x, t_host.origin_y, t_host.origin_x + host_scale, t_host.origin_y + host_scale)
            guest_frame = (t_guest.origin_x, t_guest.origin_y, t_guest.origin_x + guest_scale, t_guest.origin_y + guest_scale)
            clear_relation = max(abs(mapped_guest.cx - mapped_host.cx), abs(mapped_guest.cy - mapped_host.cy)) >= 0.07
            if _bounds_disjoint(host_frame, guest_frame, 0.02) and clear_relation:
                placed = (t_host, t_guest)
                break
        if placed is None:
            raise InfeasibleError("could not place the guest beside the host")
        regions, roots = _remap_regions(
            [host.scene, guest.scene], list(placed), [None, None]
        )
        host_new_root, guest_new_root = roots
        transforms = {host_new_root: placed[0], guest_new_root: placed[1]}

    composed = SceneSpec(width=width, height=height, regions=regions, seed=seed)
    labelmap = render_labelmap(composed)

    if picked_mode == "inside":
        referent_root = guest_new_root
    else:
        referent_root = guest_new_root if rng.random() < 0.5 else host_new_root

    candidate_roots = [host_new_root, guest_new_root]
    source_prompts = {host_new_root: host.candidates[0].prompt, guest_new_root: guest.candidates[0].prompt}
    candidates = []
    for root in candidate_roots:
        mask = region_mask(composed, root, labelmap)
        xy = np.asarray(source_prompts[root].xy, dtype=np.float64)
        transform = transforms[root]
        if transform is not None:
            xy = np.array([transform.apply(x, y) for x, y in xy])
        prompt = repair_prompt(mask, xy)
        candidates.append(PseudoLabel(mask=mask, prompt=prompt, score=1.0 if root == referent_root else 0.0))
    # inside mode uses the deterministic scan so the text always reads
    # "... inside the ..."; beside mode varies over the valid directions
    expression = realize_expression(
        composed, referent_root, "relative", rng=None if picked_mode == "inside" else rng
    )
    referent_index = candidate_roots.index(referent_root)
    return Sample(
        sample_id=sample_id or f"dref-fuse-{seed}",
        source="D_ref",
        scene=composed,
        expression=expression,
        candidates=candidates,
        gt_referent_id=referent_root,
        gt_mask=candidates[referent_index].mask,
    )


def _shrunk_inner_box(shape: Shape, shrink: float) -> tuple[float, float, float, float]:
    if shape.kind == "rect":
        rx, ry = shape.rx * shrink, shape.ry * shrink
    else:
        rx, ry = shape.rx * shrink / np.sqrt(2.0), shape.ry * shrink / np.sqrt(2.0)
    return (shape.cx - rx, shape.cy - ry, shape.cx + rx, shape.cy + ry)


def _bounds_disjoint(a: tuple[float, float, float, float], b: tuple[float, float, float, float], gap: float) -> bool:
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    return ax1 + gap <= bx0 or bx1 + gap <= ax0 or ay1 + gap <= by0 or by1 + gap <= ay0


def extract_ris_pseudolabels(
    scene: SceneSpec, expression: Expression, n_points: int, seed: int
) -> list[PseudoLabel]:
    """One score-0 candidate per distinct noun phrase in the expression.

    Candidate order is shuffled by the seed so the referent phrase's
    candidate does not always come first.  Every phrase must denote a
    unique class in the scene.
    """
    parse_expression(expression.tokens)  # rejects off-grammar token lists
    classes: list[int] = []
    for token in expression.tokens:
        cls = parse_class_token(token)
        if cls is not None and cls not in classes:
            classes.append(cls)
    if not classes:
        raise ValidationError(f"no noun phrases in expression {expression.text!r}")
    rng = np.random.default_rng(seed)
    labels = []
    for cls in classes:
        matches = [r for r in scene.regions if r.class_id == cls]
        if not matches:
            raise ValidationError(f"expression mentions class c{cls} absent from the scene")
        if len(matches) > 1:
            raise ValidationError(f"class c{cls} is ambiguous in the scene")
        mask = region_mask(scene, matches[0].id)
        prompt = sample_prompt_points(mask, n_points, int(rng.integers(2**31)))
        labels.append(PseudoLabel(mask=mask, prompt=prompt, score=0.0))
    order = rng.permutation(len(labels))
    return [labels[int(i)] for i in order]


def partition(samples: list[Sample]) -> tuple[list[Sample], list[Sample]]:
    """Split target-domain samples by candidate count.

    Single-candidate samples become H_sem with their candidate promoted
    to score 1 (the lone phrase must be the referent); multi-candidate
    samples become H_ref with scores left at 0 for Select to resolve.
    """
    h_sem: list[Sample] = []
    h_ref: list[Sample] = []
    for sample in samples:
        if any(c.score != 0.0 for c in sample.candidates):
            raise ValidationError(f"sample {sample.sample_id} already carries nonzero scores")
        if sample.n_candidates == 1:
            promoted = [replace(sample.candidates[0], score=1.0)]
            h_sem.append(replace(sample, source="H_sem", candidates=promoted))
        else:
            h_ref.append(replace(sample, source="H_ref"))
    return h_sem, h_ref


def validate_sample(sample: Sample, check_geometry: bool = True) -> None:
    """Source-conditional invariants; raises ValidationError on breach."""
    scores = [c.score for c in sample.candidates]
    if sample.source in ("D_sem", "H_sem"):
        if sample.n_candidates != 1 or scores[0] != 1.0:
            raise ValidationError(f"{sample.source} sample must have one candidate with score 1")
    elif sample.source == "D_ref":
        if sample.n_candidates < 2 or sorted(scores, reverse=True)[0] != 1.0 or sum(scores) != 1.0:
            raise ValidationError("D_ref sample needs >= 2 candidates with exactly one score 1")
    elif sample.source == "H_ref":
        if sample.n_candidates < 2 or sum(scores) not in (0.0, 1.0):
            raise ValidationError("H_ref sample needs >= 2 candidates, all score 0 or one selected")
    elif sample.source == "eval":
        if sample.gt_mask is None or sample.gt_referent_id is None:
            raise ValidationError("eval sample needs ground truth")
    if check_geometry:
        for idx, candidate in enumerate(sample.candidates):
            violations = check_prompt_geometry(candidate)
            if violations:
                raise ValidationError(
                    f"sample {sample.sample_id} candidate {idx}: " + "; ".join(violations)
                )


# ---------------------------------------------------------------------------
# corpora


@dataclass(frozen=True)
class CorpusParams:
    n_points: int = 6
    width: int = 32
    height: int = 32
    class_vocab_size: int = 16
    max_depth: int = 2
    child_prob: float = 0.6

    def world(self, n_top: int) -> WorldParams:
        return WorldParams(
            n_top=n_top,
            max_depth=self.max_depth,
            class_vocab_size=self.class_vocab_size,
            width=self.width,
            height=self.height,
            child_prob=self.child_prob,
        )


def _fresh_semantic(rng: np.random.Generator, params: CorpusParams, tag: str) -> Sample:
    for _ in range(40):
        try:
            scene = generate_scene(int(rng.integers(2**31)), params.world(n_top=1))
            return build_semantic_sample(scene, params.n_points, int(rng.integers(2**31)), sample_id=tag)
        except (ValidationError, InfeasibleError):
            continue
    raise InfeasibleError("could not draw an object-centric sample")


def _distinct_semantic_inputs(rng: np.random.Generator, params: CorpusParams, count: int) -> list[Sample]:
    out: list[Sample] = []
    used: set[int] = set()
    for i in range(count):
        for _ in range(80):
            sample = _fresh_semantic(rng, params, f"tile-{i}")
            classes = {r.class_id for r in sample.scene.regions}
            if not (classes & used):
                out.append(sample)
                used |= classes
                break
        else:
            raise InfeasibleError("could not draw class-disjoint object-centric inputs")
    return out


def build_dsem_corpus(n: int, seed: int, params: CorpusParams | None = None) -> list[Sample]:
    params = params or CorpusParams()
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        sample = _fresh_semantic(rng, params, f"dsem-{i:05d}")
        validate_sample(sample)
        out.append(sample)
    return out


def build_dref_corpus(n: int, seed: int, params: CorpusParams | None = None) -> list[Sample]:
    """Mosaic and fusion samples in a deterministic interleaving."""
    params = params or CorpusParams()
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        for _ in range(40):
            try:
                style = ("mosaic2", "fuse", "mosaic4", "fuse")[i % 4]
                if style == "mosaic2":
                    inputs = _distinct_semantic_inputs(rng, params, 2)
                    sample = compose_mosaic(inputs, int(rng.integers(2**31)), sample_id=f"dref-{i:05d}")
                elif style == "mosaic4":
                    inputs = _distinct_semantic_inputs(rng, params, 4)
                    sample = compose_mosaic(inputs, int(rng.integers(2**31)), sample_id=f"dref-{i:05d}")
                else:
                    host, guest = _distinct_semantic_inputs(rng, params, 2)
                    sample = fuse_embed(host, guest, int(rng.integers(2**31)), sample_id=f"dref-{i:05d}")
                validate_sample(sample)
                out.append(sample)
                break
            except (ValidationError, InfeasibleError):
                continue
        else:
            raise InfeasibleError(f"could not synthesize D_ref sample {i}")
    return out


_H_KINDS = ("relative", "relative", "absolute", "class")


def build_h_corpus(
    n: int,
    seed: int,
    params: CorpusParams | None = None,
    source: str = "H_ref",
    kinds: tuple[str, ...] = _H_KINDS,
) -> list[Sample]:
    """Target-domain samples: real scenes, expressions, score-0 candidates.

    The returned samples all carry ground truth for evaluation; training
    code reads only scene/expression/candidates.  Call partition() to
    split into H_sem and H_ref.  `source` only tags eval corpora; the
    training corpus keeps the pre-partition tag and ignores it.
    """
    params = params or CorpusParams()
    rng = np.random.default_rng(seed)
    out: list[Sample] = []
    for i in range(n):
        kind = kinds[i % len(kinds)]
        sample = None
        for _ in range(60):
            try:
                scene = generate_scene(int(rng.integers(2**31)), params.world(n_top=2))
            except InfeasibleError:
                continue
            referents = [r.id for r in scene.regions]
            rng.shuffle(referents)
            for rid in referents:
                try:
                    expression = realize_expression(scene, rid, kind, rng=rng)
                except ValidationError:
                    continue
                candidates = extract_ris_pseudolabels(
                    scene, expression, params.n_points, int(rng.integers(2**31))
                )
                tag = "eval" if source == "eval" else "H_ref"
                sample = Sample(
                    sample_id=f"{'eval' if source == 'eval' else 'h'}-{i:05d}",
                    source=tag,
                    scene=scene,
                    expression=expression,
                    candidates=candidates,
                    gt_referent_id=rid,
                    gt_mask=region_mask(scene, rid),
                )
                break
            if sample is not None:
                break
        if sample is None:
            raise InfeasibleError(f"could not realize a {kind} expression after bounded retries")
        out.append(sample)
    return out


def build_eval_corpus(n: int, seed: int, params: CorpusParams | None = None) -> list[Sample]:
    """Held-out split, weighted toward relative-relation expressions."""
    return build_h_corpus(
        n, seed, params, source="eval", kinds=("relative", "relative", "absolute", "relative", "class")
    )
