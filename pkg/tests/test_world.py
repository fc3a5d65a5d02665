"""Synthetic world tests: generation, rasterization, expression semantics."""

import numpy as np
import pytest

from pointprompt.errors import InfeasibleError, ValidationError
from pointprompt.world import (
    Expression,
    Region,
    SceneSpec,
    Shape,
    WorldParams,
    expression_referents,
    flip_scene,
    generate_scene,
    parse_expression,
    realize_expression,
    region_mask,
    render_labelmap,
    scene_from_json,
    scene_to_json,
)


def nested_pair_scene() -> SceneSpec:
    """Region 1 (class 3) containing region 2 (class 5), 16x16 raster."""
    outer = Region(id=1, class_id=3, shape=Shape("rect", 0.5, 0.5, 0.35, 0.35))
    inner = Region(id=2, class_id=5, shape=Shape("rect", 0.45, 0.45, 0.1, 0.1), parent=1)
    return SceneSpec(width=16, height=16, regions=(outer, inner))


# ---------------------------------------------------------------------------
# rasterization


def test_labelmap_empty_scene() -> None:
    scene = SceneSpec(width=8, height=8, regions=())
    assert (render_labelmap(scene) == 0).all()


def test_labelmap_full_frame_rect() -> None:
    region = Region(id=1, class_id=2, shape=Shape("rect", 0.5, 0.5, 0.6, 0.6))
    scene = SceneSpec(width=8, height=8, regions=(region,))
    assert (render_labelmap(scene) == 1).all()


def test_labelmap_nested_deepest_wins() -> None:
    scene = nested_pair_scene()
    label = render_labelmap(scene)
    inner_mask = region_mask(scene, 2, label)
    outer_mask = region_mask(scene, 1, label)
    assert inner_mask.area > 0
    assert (label[inner_mask.bits] == 2).all()
    # the outer region's mask covers the inner region entirely
    assert np.logical_and(outer_mask.bits, inner_mask.bits).sum() == inner_mask.area
    assert outer_mask.area > inner_mask.area


def test_region_mask_unknown_id() -> None:
    with pytest.raises(ValidationError):
        region_mask(nested_pair_scene(), 99)


# ---------------------------------------------------------------------------
# generation


def test_generate_scene_deterministic() -> None:
    params = WorldParams(n_top=3, max_depth=2, class_vocab_size=12)
    a = generate_scene(41, params)
    b = generate_scene(41, params)
    assert a == b
    assert scene_to_json(a) == scene_to_json(b)
    c = generate_scene(42, params)
    assert c != a


def test_generate_scene_structure() -> None:
    params = WorldParams(n_top=3, max_depth=3, class_vocab_size=16)
    for seed in range(25):
        scene = generate_scene(seed, params)
        tops = scene.top_level()
        assert len(tops) == 3
        classes = [r.class_id for r in scene.regions]
        assert len(set(classes)) == len(classes)  # no duplicate classes
        assert all(scene.depth(r.id) < params.max_depth for r in scene.regions)
        label = render_labelmap(scene)
        for r in scene.regions:
            mask = region_mask(scene, r.id, label)
            assert mask.area > 0, f"seed {seed}: region {r.id} rasterized empty"
            if r.parent is not None:
                parent_mask = region_mask(scene, r.parent, label)
                assert np.logical_and(mask.bits, ~parent_mask.bits).sum() == 0
        # top-level regions are raster-disjoint
        for a in tops:
            for b in tops:
                if a.id < b.id:
                    am = region_mask(scene, a.id, label)
                    bm = region_mask(scene, b.id, label)
                    assert not np.logical_and(am.bits, bm.bits).any()


def test_generate_scene_infeasible_packing() -> None:
    with pytest.raises(InfeasibleError):
        generate_scene(0, WorldParams(n_top=80, class_vocab_size=100))


def test_world_params_validation() -> None:
    with pytest.raises(ValidationError):
        WorldParams(n_top=0)
    with pytest.raises(ValidationError):
        WorldParams(n_top=5, class_vocab_size=3)


def test_flip_scene_mirrors_raster() -> None:
    scene = generate_scene(7, WorldParams(n_top=2, class_vocab_size=8))
    flipped = flip_scene(scene)
    assert np.array_equal(render_labelmap(flipped), np.fliplr(render_labelmap(scene)))


# ---------------------------------------------------------------------------
# expressions


def test_realize_class_template() -> None:
    scene = nested_pair_scene()
    expr = realize_expression(scene, 1, "class")
    assert expr.tokens == ("the", "c3", "in", "the", "middle")
    assert expr.kind == "class"
    assert expr.referent_id == 1


def test_realize_absolute_leftmost() -> None:
    left = Region(id=1, class_id=1, shape=Shape("rect", 0.2, 0.5, 0.1, 0.1))
    right = Region(id=2, class_id=2, shape=Shape("rect", 0.8, 0.5, 0.1, 0.1))
    scene = SceneSpec(width=16, height=16, regions=(left, right))
    expr = realize_expression(scene, 1, "absolute")
    assert expr.tokens == ("the", "c1", "on", "the", "left")


def test_realize_relative_inside() -> None:
    scene = nested_pair_scene()
    expr = realize_expression(scene, 2, "relative")
    assert expr.tokens == ("the", "c5", "inside", "the", "c3")
    assert expression_referents(scene, expr) == [2]


def test_realize_relative_beside() -> None:
    a = Region(id=1, class_id=4, shape=Shape("ellipse", 0.25, 0.5, 0.12, 0.12))
    b = Region(id=2, class_id=7, shape=Shape("rect", 0.75, 0.5, 0.12, 0.12))
    scene = SceneSpec(width=16, height=16, regions=(a, b))
    expr = realize_expression(scene, 1, "relative")
    assert expr.tokens == ("the", "c4", "left", "of", "the", "c7")
    expr2 = realize_expression(scene, 2, "relative")
    assert expr2.tokens == ("the", "c7", "right", "of", "the", "c4")


def test_realize_rejects_impossible_kind() -> None:
    # a lone centered region has no relative-relation description
    lone = Region(id=1, class_id=2, shape=Shape("rect", 0.5, 0.5, 0.2, 0.2))
    scene = SceneSpec(width=8, height=8, regions=(lone,))
    with pytest.raises(ValidationError):
        realize_expression(scene, 1, "relative")
    with pytest.raises(ValidationError):
        realize_expression(scene, 1, "unknown-kind")


def test_absolute_near_tie_is_rejected() -> None:
    # centroid inside the margin band around 0.5: no direction applies
    r = Region(id=1, class_id=2, shape=Shape("rect", 0.52, 0.5, 0.45, 0.45))
    scene = SceneSpec(width=8, height=8, regions=(r,))
    assert expression_referents(scene, Expression(("the", "c2", "on", "the", "left"), "absolute")) == []
    assert expression_referents(scene, Expression(("the", "c2", "on", "the", "right"), "absolute")) == []
    # but it still counts as middle
    assert expression_referents(scene, Expression(("the", "c2", "on", "the", "middle"), "absolute")) == [1]


def test_exactly_one_referent_across_generated_corpus() -> None:
    params = WorldParams(n_top=2, max_depth=2, class_vocab_size=10)
    rng = np.random.default_rng(123)
    checked = 0
    for seed in range(100):
        scene = generate_scene(seed, params)
        for region in scene.regions:
            for kind in ("class", "absolute", "relative"):
                try:
                    expr = realize_expression(scene, region.id, kind, rng=rng)
                except ValidationError:
                    continue  # this kind has no valid realization here
                refs = expression_referents(scene, expr)
                assert refs == [region.id], (seed, region.id, expr.text, refs)
                checked += 1
    assert checked > 150  # the corpus actually exercised the grammar


def test_parse_expression_roundtrip() -> None:
    cases = [
        ("the c3 in the middle", "class"),
        ("the c1 on the left", "absolute"),
        ("the c2 left of the c5", "relative"),
        ("the c2 right of the c5", "relative"),
        ("the c2 above the c5", "relative"),
        ("the c9 inside the c4", "relative"),
    ]
    for text, kind in cases:
        expr = parse_expression(text)
        assert expr.kind == kind
        assert expr.text == text


def test_parse_expression_rejects_garbage() -> None:
    for text in ["", "the", "a c3 in the middle", "the dog on the left", "the c3 under the c4", "the c3 in the left"]:
        with pytest.raises(ValidationError):
            parse_expression(text)


# ---------------------------------------------------------------------------
# serialization


def test_scene_json_roundtrip() -> None:
    scene = generate_scene(5, WorldParams(n_top=2, max_depth=3, class_vocab_size=9))
    again = scene_from_json(scene_to_json(scene))
    assert again == scene
    assert np.array_equal(render_labelmap(again), render_labelmap(scene))


def test_scene_json_malformed() -> None:
    with pytest.raises(ValidationError):
        scene_from_json("not json at all {")
    with pytest.raises(ValidationError):
        scene_from_json("{\"width\": 8}")


def test_scene_spec_validation() -> None:
    shape = Shape("rect", 0.5, 0.5, 0.1, 0.1)
    with pytest.raises(ValidationError):
        SceneSpec(width=8, height=8, regions=(Region(1, 1, shape), Region(1, 2, shape)))
    with pytest.raises(ValidationError):
        SceneSpec(width=8, height=8, regions=(Region(1, 1, shape, parent=9),))
    with pytest.raises(ValidationError):
        SceneSpec(width=0, height=8, regions=())
