"""Deterministic synthetic world of nested axis-aligned regions.

A scene is a forest of rectangle/ellipse regions in the unit square;
children lie strictly inside their parents, top-level regions are
pairwise disjoint, and every region carries a class id drawn without
replacement from a small vocabulary.  Rasterization labels each pixel
with the deepest region whose shape contains the pixel center.

Expressions come from a closed template grammar over class tokens
"c<id>":

    class              "the cA in the middle"
    absolute-position  "the cA on the {left|right|top|bottom|middle}"
    relative-relation  "the cA {left of|right of|above|below|inside} the cB"

Their formal semantics (used both to realize expressions and to verify
the exactly-one-referent invariant) evaluate over shape centroids with
a 0.05 comparison margin, so near-ties never count as satisfied:

    left       cx <= 0.5 - margin          (right/top/bottom mirrored)
    middle     max(|cx-0.5|, |cy-0.5|) <= 0.12
    left of    a.cx <= b.cx - margin       (right of/above/below mirrored)
    inside     b is a proper ancestor of a

The "in the middle" tail of the class template is a fixed filler, not a
positional constraint; only the class token binds.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InfeasibleError, ValidationError
from .masks import BitMask

MARGIN = 0.05
MIDDLE_RADIUS = 0.12

ABSOLUTE_DIRECTIONS = ("left", "right", "top", "bottom", "middle")
RELATIONS = ("left of", "right of", "above", "below", "inside")
# containment is the most informative relation, so realization tries it first
_REALIZE_RELATION_ORDER = ("inside", "left of", "right of", "above", "below")

_CLASS_TOKEN = re.compile(r"^c([1-9][0-9]*)$")


# ---------------------------------------------------------------------------
# geometry


@dataclass(frozen=True)
class Shape:
    """Axis-aligned rectangle or ellipse given by center and half-extents."""

    kind: str  # "rect" or "ellipse"
    cx: float
    cy: float
    rx: float
    ry: float

    def __post_init__(self) -> None:
        if self.kind not in ("rect", "ellipse"):
            raise ValidationError(f"unknown shape kind {self.kind!r}")
        if self.rx <= 0.0 or self.ry <= 0.0:
            raise ValidationError("shape half-extents must be positive")

    def contains(self, x: float, y: float) -> bool:
        dx = x - self.cx
        dy = y - self.cy
        if self.kind == "rect":
            return abs(dx) <= self.rx and abs(dy) <= self.ry
        return (dx / self.rx) ** 2 + (dy / self.ry) ** 2 <= 1.0

    def contains_grid(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        """Vectorized contains() over broadcastable coordinate arrays."""
        dx = xs - self.cx
        dy = ys - self.cy
        if self.kind == "rect":
            return (np.abs(dx) <= self.rx) & (np.abs(dy) <= self.ry)
        return (dx / self.rx) ** 2 + (dy / self.ry) ** 2 <= 1.0

    def bounds(self) -> tuple[float, float, float, float]:
        return (self.cx - self.rx, self.cy - self.ry, self.cx + self.rx, self.cy + self.ry)


@dataclass(frozen=True)
class Region:
    id: int
    class_id: int
    shape: Shape
    parent: int | None = None


@dataclass(frozen=True)
class SceneSpec:
    width: int
    height: int
    regions: tuple[Region, ...]
    seed: int = 0

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ValidationError("scene raster dimensions must be positive")
        regions = tuple(self.regions)
        ids = [r.id for r in regions]
        if len(set(ids)) != len(ids) or 0 in ids:
            raise ValidationError("region ids must be unique and nonzero")
        known = set(ids)
        for r in regions:
            if r.parent is not None and r.parent not in known:
                raise ValidationError(f"region {r.id} has unknown parent {r.parent}")
        object.__setattr__(self, "regions", regions)

    def region(self, rid: int) -> Region:
        for r in self.regions:
            if r.id == rid:
                return r
        raise ValidationError(f"no region with id {rid}")

    def children_of(self, rid: int | None) -> list[Region]:
        return [r for r in self.regions if r.parent == rid]

    def ancestors(self, rid: int) -> list[int]:
        """Chain of proper ancestor ids, nearest first."""
        out: list[int] = []
        cur = self.region(rid).parent
        while cur is not None:
            out.append(cur)
            cur = self.region(cur).parent
        return out

    def depth(self, rid: int) -> int:
        return len(self.ancestors(rid))

    def top_level(self) -> list[Region]:
        return self.children_of(None)


@dataclass(frozen=True)
class Expression:
    """Tokenized referring expression plus its template kind.

    referent_id is ground truth carried for evaluation and is stripped
    when expressions are serialized into training manifests.
    """

    tokens: tuple[str, ...]
    kind: str  # "class", "absolute", "relative"
    referent_id: int | None = None

    @property
    def text(self) -> str:
        return " ".join(self.tokens)


def class_token(class_id: int) -> str:
    return f"c{class_id}"


def parse_class_token(token: str) -> int | None:
    m = _CLASS_TOKEN.match(token)
    return int(m.group(1)) if m else None


# ---------------------------------------------------------------------------
# scene generation


@dataclass(frozen=True)
class WorldParams:
    n_top: int = 2
    max_depth: int = 2
    class_vocab_size: int = 16
    width: int = 32
    height: int = 32
    child_prob: float = 0.6

    def __post_init__(self) -> None:
        if self.n_top < 1:
            raise ValidationError("n_top must be at least 1")
        if self.max_depth < 1:
            raise ValidationError("max_depth must be at least 1")
        if self.class_vocab_size < self.n_top:
            raise ValidationError("class vocabulary smaller than n_top")


_TOP_EXTENTS = {1: (0.18, 0.30), 2: (0.11, 0.18), 3: (0.09, 0.15), 4: (0.08, 0.13)}
_GAP = 0.02


def _boxes_disjoint(a: tuple[float, float, float, float], b: tuple[float, float, float, float], gap: float = _GAP) -> bool:
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    return ax1 + gap <= bx0 or bx1 + gap <= ax0 or ay1 + gap <= by0 or by1 + gap <= ay0


def _inner_box(shape: Shape, shrink: float = 0.85) -> tuple[float, float, float, float]:
    """Largest axis-aligned box guaranteed inside the shape, then shrunk."""
    if shape.kind == "rect":
        rx, ry = shape.rx * shrink, shape.ry * shrink
    else:
        rx, ry = shape.rx * shrink / np.sqrt(2.0), shape.ry * shrink / np.sqrt(2.0)
    return (shape.cx - rx, shape.cy - ry, shape.cx + rx, shape.cy + ry)


def generate_scene(seed: int, params: WorldParams | None = None) -> SceneSpec:
    """Sample a scene deterministically from the seed.

    Raises InfeasibleError when the packing retry budget runs out,
    which at the default extents only happens for adversarial params.
    """
    params = params or WorldParams()
    rng = np.random.default_rng(seed)
    lo, hi = _TOP_EXTENTS.get(params.n_top, (0.06, 0.11))

    for _ in range(25):  # scene-level restarts
        placed: list[Shape] = []
        ok = True
        for _ in range(params.n_top):
            shape = None
            for _ in range(80):
                rx = float(rng.uniform(lo, hi))
                ry = float(rng.uniform(lo, hi))
                cx = float(rng.uniform(rx + _GAP, 1.0 - rx - _GAP))
                cy = float(rng.uniform(ry + _GAP, 1.0 - ry - _GAP))
                kind = "rect" if rng.random() < 0.5 else "ellipse"
                cand = Shape(kind, cx, cy, rx, ry)
                if all(_boxes_disjoint(cand.bounds(), p.bounds()) for p in placed):
                    shape = cand
                    break
            if shape is None:
                ok = False
                break
            placed.append(shape)
        if ok:
            break
    else:
        raise InfeasibleError(f"could not pack {params.n_top} top-level regions")

    classes = [int(c) for c in rng.permutation(np.arange(1, params.class_vocab_size + 1))]
    regions: list[Region] = []
    next_id = 1
    frontier: list[int] = []
    for shape in placed:
        regions.append(Region(id=next_id, class_id=classes.pop(0), shape=shape))
        frontier.append(next_id)
        next_id += 1

    # one optional child per region, chaining down to max_depth; children
    # below ~1.5 pixels of half-extent would rasterize unreliably, so the
    # chain stops early instead of emitting them
    min_rx = 1.5 / params.width
    min_ry = 1.5 / params.height
    for depth in range(1, params.max_depth):
        next_frontier: list[int] = []
        for rid in frontier:
            if not classes or rng.random() >= params.child_prob:
                continue
            parent = regions[rid - 1].shape
            ix0, iy0, ix1, iy1 = _inner_box(parent)
            pw, ph = ix1 - ix0, iy1 - iy0
            crx = float(rng.uniform(0.30, 0.45)) * pw / 2.0
            cry = float(rng.uniform(0.30, 0.45)) * ph / 2.0
            if crx < min_rx or cry < min_ry:
                continue
            ccx = float(rng.uniform(ix0 + crx, ix1 - crx))
            ccy = float(rng.uniform(iy0 + cry, iy1 - cry))
            kind = "rect" if rng.random() < 0.5 else "ellipse"
            regions.append(
                Region(id=next_id, class_id=classes.pop(0), shape=Shape(kind, ccx, ccy, crx, cry), parent=rid)
            )
            next_frontier.append(next_id)
            next_id += 1
        frontier = next_frontier

    return SceneSpec(width=params.width, height=params.height, regions=tuple(regions), seed=seed)


def flip_scene(scene: SceneSpec) -> SceneSpec:
    """Mirror the scene horizontally (x -> 1 - x)."""
    flipped = tuple(
        replace(r, shape=replace(r.shape, cx=1.0 - r.shape.cx)) for r in scene.regions
    )
    return replace(scene, regions=flipped)


# ---------------------------------------------------------------------------
# rasterization


def render_labelmap(scene: SceneSpec) -> np.ndarray:
    """Label each pixel with the deepest containing region id (0 = none).

    Pixel (i, j) is tested at its center ((j+.5)/W, (i+.5)/H).
    """
    h, w = scene.height, scene.width
    xs = (np.arange(w) + 0.5) / w
    ys = (np.arange(h) + 0.5) / h
    gx, gy = np.meshgrid(xs, ys)
    label = np.zeros((h, w), dtype=np.int32)
    order = sorted(scene.regions, key=lambda r: scene.depth(r.id))
    for region in order:
        label[region.shape.contains_grid(gx, gy)] = region.id
    return label


def subtree_ids(scene: SceneSpec, rid: int) -> set[int]:
    scene.region(rid)  # raises on unknown id
    out = {rid}
    queue = [rid]
    while queue:
        cur = queue.pop()
        for child in scene.children_of(cur):
            out.add(child.id)
            queue.append(child.id)
    return out


def region_mask(scene: SceneSpec, rid: int, labelmap: np.ndarray | None = None) -> BitMask:
    """Pixels whose deepest-region chain passes through rid."""
    if labelmap is None:
        labelmap = render_labelmap(scene)
    ids = subtree_ids(scene, rid)
    return BitMask(np.isin(labelmap, sorted(ids)))


# ---------------------------------------------------------------------------
# expression semantics


def _centroid(region: Region) -> tuple[float, float]:
    return region.shape.cx, region.shape.cy


def _direction_holds(region: Region, direction: str) -> bool:
    cx, cy = _centroid(region)
    if direction == "left":
        return cx <= 0.5 - MARGIN
    if direction == "right":
        return cx >= 0.5 + MARGIN
    if direction == "top":
        return cy <= 0.5 - MARGIN
    if direction == "bottom":
        return cy >= 0.5 + MARGIN
    if direction == "middle":
        return max(abs(cx - 0.5), abs(cy - 0.5)) <= MIDDLE_RADIUS
    raise ValidationError(f"unknown direction {direction!r}")


def _relation_holds(scene: SceneSpec, a: Region, b: Region) -> dict[str, bool]:
    ax, ay = _centroid(a)
    bx, by = _centroid(b)
    return {
        "left of": ax <= bx - MARGIN,
        "right of": ax >= bx + MARGIN,
        "above": ay <= by - MARGIN,
        "below": ay >= by + MARGIN,
        "inside": b.id in scene.ancestors(a.id),
    }


def parse_expression(text_or_tokens: str | list[str] | tuple[str, ...]) -> Expression:
    """Recover the template kind from raw tokens (referent left unset)."""
    if isinstance(text_or_tokens, str):
        tokens = tuple(text_or_tokens.split())
    else:
        tokens = tuple(text_or_tokens)
    bad = ValidationError(f"cannot parse expression {' '.join(tokens)!r}")
    if len(tokens) < 5 or tokens[0] != "the" or parse_class_token(tokens[1]) is None:
        raise bad
    if len(tokens) == 5 and tokens[2] == "in" and tokens[3] == "the" and tokens[4] == "middle":
        return Expression(tokens, "class")
    if len(tokens) == 5 and tokens[2] == "on" and tokens[3] == "the" and tokens[4] in ABSOLUTE_DIRECTIONS:
        return Expression(tokens, "absolute")
    if (
        len(tokens) == 6
        and tokens[2] in ("left", "right")
        and tokens[3] == "of"
        and tokens[4] == "the"
        and parse_class_token(tokens[5]) is not None
    ):
        return Expression(tokens, "relative")
    if (
        len(tokens) == 5
        and tokens[2] in ("above", "below", "inside")
        and tokens[3] == "the"
        and parse_class_token(tokens[4]) is not None
    ):
        return Expression(tokens, "relative")
    raise bad


def expression_referents(scene: SceneSpec, expr: Expression) -> list[int]:
    """Region ids satisfying the expression under the formal semantics."""
    parsed = parse_expression(expr.tokens)
    cls = parse_class_token(parsed.tokens[1])
    assert cls is not None
    candidates = [r for r in scene.regions if r.class_id == cls]
    if parsed.kind == "class":
        return [r.id for r in candidates]
    if parsed.kind == "absolute":
        direction = parsed.tokens[4]
        return [r.id for r in candidates if _direction_holds(r, direction)]
    # relative
    if parsed.tokens[2] in ("left", "right"):
        relation = f"{parsed.tokens[2]} of"
        anchor_cls = parse_class_token(parsed.tokens[5])
    else:
        relation = parsed.tokens[2]
        anchor_cls = parse_class_token(parsed.tokens[4])
    anchors = [r for r in scene.regions if r.class_id == anchor_cls]
    out = []
    for a in candidates:
        if any(b.id != a.id and _relation_holds(scene, a, b)[relation] for b in anchors):
            out.append(a.id)
    return out


def _check_unique(scene: SceneSpec, expr: Expression) -> Expression:
    refs = expression_referents(scene, expr)
    if refs != [expr.referent_id]:
        raise ValidationError(
            f"expression {expr.text!r} denotes regions {refs}, wanted [{expr.referent_id}]"
        )
    return expr


def realize_expression(
    scene: SceneSpec,
    referent_id: int,
    kind: str,
    rng: np.random.Generator | None = None,
) -> Expression:
    """Produce an expression of the given kind denoting exactly the referent.

    Deterministic without an rng (largest-margin direction, first valid
    relation/anchor pair in a fixed scan order); with an rng, a uniform
    choice among the valid options.  Raises ValidationError when the
    scene admits no unique-referent expression of this kind.
    """
    referent = scene.region(referent_id)
    cls = class_token(referent.class_id)

    if kind == "class":
        expr = Expression(("the", cls, "in", "the", "middle"), "class", referent_id)
        return _check_unique(scene, expr)

    if kind == "absolute":
        cx, cy = _centroid(referent)
        scored: list[tuple[float, str]] = []
        for direction in ABSOLUTE_DIRECTIONS:
            if not _direction_holds(referent, direction):
                continue
            if direction == "middle":
                slack = MIDDLE_RADIUS - max(abs(cx - 0.5), abs(cy - 0.5))
            else:
                offset = {"left": 0.5 - cx, "right": cx - 0.5, "top": 0.5 - cy, "bottom": cy - 0.5}[direction]
                slack = offset - MARGIN
            expr = Expression(("the", cls, "on", "the", direction), "absolute", referent_id)
            if expression_referents(scene, expr) == [referent_id]:
                scored.append((slack, direction))
        if not scored:
            raise ValidationError(f"no unique absolute-position expression for region {referent_id}")
        if rng is not None:
            direction = sorted(d for _, d in scored)[int(rng.integers(len(scored)))]
        else:
            direction = max(scored, key=lambda sd: (sd[0], sd[1]))[1]
        return Expression(("the", cls, "on", "the", direction), "absolute", referent_id)

    if kind == "relative":
        options: list[Expression] = []
        for relation in _REALIZE_RELATION_ORDER:
            for anchor in sorted(scene.regions, key=lambda r: r.id):
                if anchor.id == referent_id:
                    continue
                if not _relation_holds(scene, referent, anchor)[relation]:
                    continue
                a_cls = class_token(anchor.class_id)
                if relation in ("left of", "right of"):
                    tokens = ("the", cls, *relation.split(), "the", a_cls)
                else:
                    tokens = ("the", cls, relation, "the", a_cls)
                expr = Expression(tokens, "relative", referent_id)
                if expression_referents(scene, expr) == [referent_id]:
                    options.append(expr)
        if not options:
            raise ValidationError(f"no unique relative-relation expression for region {referent_id}")
        if rng is not None:
            return options[int(rng.integers(len(options)))]
        return options[0]

    raise ValidationError(f"unknown expression kind {kind!r}")


# ---------------------------------------------------------------------------
# serialization


def scene_to_dict(scene: SceneSpec) -> dict:
    return {
        "width": scene.width,
        "height": scene.height,
        "seed": scene.seed,
        "regions": [
            {
                "id": r.id,
                "class_id": r.class_id,
                "parent": r.parent,
                "shape": {
                    "kind": r.shape.kind,
                    "cx": r.shape.cx,
                    "cy": r.shape.cy,
                    "rx": r.shape.rx,
                    "ry": r.shape.ry,
                },
            }
            for r in scene.regions
        ],
    }


def scene_from_dict(data: dict) -> SceneSpec:
    try:
        regions = tuple(
            Region(
                id=int(r["id"]),
                class_id=int(r["class_id"]),
                parent=None if r.get("parent") is None else int(r["parent"]),
                shape=Shape(
                    kind=r["shape"]["kind"],
                    cx=float(r["shape"]["cx"]),
                    cy=float(r["shape"]["cy"]),
                    rx=float(r["shape"]["rx"]),
                    ry=float(r["shape"]["ry"]),
                ),
            )
            for r in data["regions"]
        )
        return SceneSpec(
            width=int(data["width"]),
            height=int(data["height"]),
            regions=regions,
            seed=int(data.get("seed", 0)),
        )
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed scene dict: {exc}") from exc


def scene_to_json(scene: SceneSpec) -> str:
    return json.dumps(scene_to_dict(scene), sort_keys=True)


def scene_from_json(text: str) -> SceneSpec:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"invalid scene JSON: {exc}") from exc
    return scene_from_dict(data)
