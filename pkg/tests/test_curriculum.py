"""Staged training schedule, Select, and resumable full runs."""

import json
import math
import os

import numpy as np
import pytest
import torch

from pointprompt.curriculum import (
    STAGE_DATASETS,
    CurriculumConfig,
    StagePlan,
    run_curriculum,
    select_referents,
    selection_accuracy,
    stage_plan,
    train_stage,
)
from pointprompt.decoders import ToyNestedRegionDecoder
from pointprompt.encoders import EncoderConfig, SyntheticEncoder
from pointprompt.errors import ValidationError
from pointprompt.factory import (
    CorpusParams,
    Sample,
    build_dref_corpus,
    build_dsem_corpus,
    build_h_corpus,
    extract_ris_pseudolabels,
    partition,
    read_manifest,
)
from pointprompt.generator import GeneratorConfig, PointGenerator, load_checkpoint
from pointprompt.world import Region, SceneSpec, Shape, parse_expression, region_mask

torch.set_num_threads(1)

PARAMS = CorpusParams(n_points=4)


def tiny_config(**overrides):
    base = dict(
        n_stages=2,
        feat_dim=16,
        strides=(8, 16),
        token_dim=16,
        n_queries=4,
        n_points=4,
        epochs_semantic=1,
        epochs_ris1=1,
        epochs_ris2=1,
        refine_rounds=1,
        epochs_per_round=1,
        batch_size=8,
        lr=0.003,
        seed=0,
    )
    base.update(overrides)
    return CurriculumConfig(**base)


def fresh_generator(config, init_seed=0):
    encoder = SyntheticEncoder(config.encoder_config())
    decoder = ToyNestedRegionDecoder()
    return PointGenerator(config.generator_config(), encoder, decoder, init_seed=init_seed)


@pytest.fixture(scope="module")
def datasets():
    h_sem, h_ref = partition(build_h_corpus(12, 23, PARAMS))
    return {
        "D_sem": build_dsem_corpus(8, 21, PARAMS),
        "D_ref": build_dref_corpus(8, 22, PARAMS),
        "H_sem": h_sem,
        "H_ref": h_ref,
    }


def logit(p):
    return math.log(p / (1.0 - p))


def zero_parameters(gen):
    with torch.no_grad():
        for param in gen.parameters():
            param.zero_()


def wire_fixed_prediction(gen, x, y):
    """Query 0 confident, every point at (x, y) with a positive label."""
    zero_parameters(gen)
    with torch.no_grad():
        gen.queries[0, 0] = 10.0
        for k in range(1, gen.config.n_queries):
            gen.queries[k, 0] = -10.0
        gen.score_head[0].weight[0, 0] = 1.0
        gen.score_head[2].weight[0, 0] = 1.0
        gen.score_head[2].bias[0] = -5.0
        for m in range(gen.config.n_points):
            gen.point_head[2].bias[3 * m + 0] = logit(x)
            gen.point_head[2].bias[3 * m + 1] = logit(y)
            gen.point_head[2].bias[3 * m + 2] = 4.0


# ---------------------------------------------------------------------------
# configuration


def test_config_json_roundtrip():
    config = tiny_config(tau_select=0.6, select_mode="random", manifests={"D_sem": "a.jsonl"})
    clone = CurriculumConfig.from_json(config.to_json())
    assert clone == config
    assert clone.strides == (8, 16)


def test_config_rejects_bad_values():
    with pytest.raises(ValidationError):
        tiny_config(select_mode="oracle")
    with pytest.raises(ValidationError):
        tiny_config(tau_select=1.5)
    with pytest.raises(ValidationError):
        tiny_config(epochs_semantic=-1)
    with pytest.raises(ValidationError):
        tiny_config(strides=(8,))  # two stages need two strides
    with pytest.raises(ValidationError):
        CurriculumConfig.from_json('{"no_such_field": 1}')
    with pytest.raises(ValidationError):
        CurriculumConfig.from_json("{broken")


def test_stage_plans_fix_their_datasets():
    config = tiny_config()
    assert stage_plan("semantic", config).sources == ("D_sem", "H_sem")
    assert stage_plan("ris_step1", config).sources == ("D_sem", "H_sem", "D_ref")
    assert stage_plan("ris_step2", config).sources == ("D_sem", "H_sem", "D_ref", "H_ref")
    refine = stage_plan("refine", config, round_index=2)
    assert refine.sources == ("H_sem", "H_ref")
    assert refine.epochs == config.epochs_per_round
    with pytest.raises(ValidationError):
        stage_plan("refine", config)
    with pytest.raises(ValidationError):
        StagePlan("semantic", ("D_sem", "D_ref"), 1, 0)
    # derived stage seeds are stable and distinct
    assert stage_plan("semantic", config).seed == stage_plan("semantic", config).seed
    assert stage_plan("semantic", config).seed != stage_plan("ris_step1", config).seed


# ---------------------------------------------------------------------------
# train_stage


def test_zero_epochs_leave_parameters_bitwise_unchanged(datasets):
    config = tiny_config(epochs_semantic=0)
    gen = fresh_generator(config)
    before = gen.parameter_vector().copy()
    losses = train_stage(gen, stage_plan("semantic", config), datasets, config)
    assert losses == []
    assert np.array_equal(gen.parameter_vector(), before)


def test_semantic_loss_strictly_decreases_over_five_epochs(datasets):
    # full-batch descent on object-centric data alone; the step size is
    # kept small because the decoded-mask term moves in discrete jumps
    config = tiny_config(epochs_semantic=5, lr=2e-4)
    gen = fresh_generator(config)
    losses = train_stage(gen, stage_plan("semantic", config), {"D_sem": datasets["D_sem"], "H_sem": []}, config)
    assert len(losses) == 5
    for earlier, later in zip(losses, losses[1:]):
        assert later < earlier


def test_training_is_deterministic(datasets):
    config = tiny_config(epochs_semantic=2)
    vecs = []
    for _ in range(2):
        gen = fresh_generator(config)
        train_stage(gen, stage_plan("semantic", config), datasets, config)
        vecs.append(gen.parameter_vector())
    assert np.array_equal(vecs[0], vecs[1])


def test_missing_or_empty_datasets_are_rejected(datasets):
    config = tiny_config()
    gen = fresh_generator(config)
    with pytest.raises(ValidationError):
        train_stage(gen, stage_plan("semantic", config), {"D_sem": datasets["D_sem"]}, config)
    with pytest.raises(ValidationError):
        train_stage(gen, stage_plan("semantic", config), {"D_sem": [], "H_sem": []}, config)


def test_refine_stage_refuses_object_centric_samples(datasets):
    config = tiny_config()
    gen = fresh_generator(config)
    smuggled = {
        "H_sem": datasets["H_sem"] + [datasets["D_sem"][0]],
        "H_ref": [],
    }
    with pytest.raises(ValidationError):
        train_stage(gen, stage_plan("refine", config, round_index=1), smuggled, config)


def test_non_finite_loss_aborts_with_diagnostic(datasets, monkeypatch):
    import pointprompt.curriculum as curriculum_module

    config = tiny_config(epochs_semantic=1)
    gen = fresh_generator(config)

    class BadLoss:
        total = torch.tensor(float("inf"), dtype=torch.float64)

    monkeypatch.setattr(curriculum_module, "total_loss", lambda *a, **k: BadLoss())
    with pytest.raises(RuntimeError, match="non-finite"):
        train_stage(gen, stage_plan("semantic", config), datasets, config)


# ---------------------------------------------------------------------------
# Select


def three_object_sample():
    scene = SceneSpec(
        width=32,
        height=32,
        regions=(
            Region(id=1, class_id=3, shape=Shape("rect", 0.2, 0.5, 0.12, 0.12)),
            Region(id=2, class_id=5, shape=Shape("rect", 0.5, 0.5, 0.12, 0.12)),
            Region(id=3, class_id=7, shape=Shape("rect", 0.8, 0.5, 0.12, 0.12)),
        ),
    )
    expr = parse_expression("the c3 left of the c5")
    candidates = extract_ris_pseudolabels(scene, expr, 4, seed=3)
    return Sample(
        sample_id="hx-0",
        source="H_ref",
        scene=scene,
        expression=expr,
        candidates=candidates,
        gt_referent_id=1,
        gt_mask=region_mask(scene, 1),
    )


def test_select_picks_exactly_agreeing_candidate():
    sample = three_object_sample()
    config = tiny_config()
    gen = fresh_generator(config)
    wire_fixed_prediction(gen, 0.2, 0.5)  # decodes region 1 exactly
    selected, rows = select_referents(gen, [sample], tau_select=0.5)
    assert len(selected) == 1
    assert rows[0]["included"] and rows[0]["iou"] == 1.0
    picked = selected[0].candidates[rows[0]["picked"]]
    assert picked.score == 1.0
    assert picked.mask == region_mask(sample.scene, 1)
    assert sum(c.score for c in selected[0].candidates) == 1.0
    # the input sample is untouched
    assert all(c.score == 0.0 for c in sample.candidates)
    assert selection_accuracy([sample], rows) == 1.0


def test_select_excludes_low_agreement_samples():
    sample = three_object_sample()
    config = tiny_config()
    gen = fresh_generator(config)
    wire_fixed_prediction(gen, 0.8, 0.5)  # decodes region 3, not a candidate
    selected, rows = select_referents(gen, [sample], tau_select=0.5)
    assert selected == []
    assert rows[0] == {"sample_id": "hx-0", "picked": None, "iou": 0.0, "included": False}


def test_select_is_monotone_in_threshold(datasets):
    config = tiny_config()
    gen = fresh_generator(config, init_seed=5)
    included = []
    for tau in (0.0, 0.25, 0.5, 0.75, 1.0):
        selected, _ = select_referents(gen, datasets["H_ref"], tau_select=tau)
        included.append({s.sample_id for s in selected})
    assert included[0] == {s.sample_id for s in datasets["H_ref"]}
    for wider, narrower in zip(included, included[1:]):
        assert narrower <= wider


def test_random_select_includes_everything(datasets):
    config = tiny_config()
    gen = fresh_generator(config)
    rng = np.random.default_rng(0)
    selected, rows = select_referents(gen, datasets["H_ref"], mode="random", rng=rng)
    assert len(selected) == len(datasets["H_ref"])
    assert all(row["included"] and row["iou"] is None for row in rows)
    with pytest.raises(ValidationError):
        select_referents(gen, datasets["H_ref"], mode="random")


def test_select_rejects_tainted_inputs(datasets):
    config = tiny_config()
    gen = fresh_generator(config)
    with pytest.raises(ValidationError):
        select_referents(gen, [datasets["D_sem"][0]])
    selected, _ = select_referents(gen, datasets["H_ref"], tau_select=0.0)
    with pytest.raises(ValidationError):
        select_referents(gen, selected)


# ---------------------------------------------------------------------------
# full schedule


def test_full_run_persists_every_artifact(datasets, tmp_path):
    config = tiny_config()
    result = run_curriculum(config, datasets, str(tmp_path / "run"))
    assert set(result.checkpoints) == {"semantic", "ris_step1", "ris_step2", "round1"}
    for path in result.checkpoints.values():
        assert os.path.exists(path)
    assert set(result.manifests) == {"select0", "select1"}
    for path in result.manifests.values():
        for sample in read_manifest(path):
            assert sample.source == "H_ref"
            assert sum(c.score for c in sample.candidates) == 1.0
    assert os.path.exists(result.final_path)
    with open(tmp_path / "run" / "runlog.jsonl") as fh:
        rows = [json.loads(line) for line in fh]
    assert {"semantic", "ris_step1", "ris_step2", "refine", "select0", "select1"} <= {r["stage"] for r in rows}
    assert list(result.epoch_losses) == ["semantic", "ris_step1", "ris_step2", "round1"]


def test_zero_refine_rounds_end_at_theta_ref(datasets, tmp_path):
    config = tiny_config(refine_rounds=0)
    result = run_curriculum(config, datasets, str(tmp_path / "run"))
    ref, _ = load_checkpoint(result.checkpoints["ris_step2"])
    final, _ = load_checkpoint(result.final_path)
    assert np.array_equal(ref.parameter_vector(), final.parameter_vector())


def test_runs_are_reproducible(datasets, tmp_path):
    config = tiny_config()
    a = run_curriculum(config, datasets, str(tmp_path / "a"))
    b = run_curriculum(config, datasets, str(tmp_path / "b"))
    assert np.array_equal(a.generator.parameter_vector(), b.generator.parameter_vector())


def test_interrupted_run_resumes_to_identical_parameters(datasets, tmp_path):
    config = tiny_config()
    oneshot = run_curriculum(config, datasets, str(tmp_path / "oneshot"))
    partial = run_curriculum(config, datasets, str(tmp_path / "split"), stop_after="ris_step1")
    assert partial.final_path == ""
    assert set(partial.checkpoints) == {"semantic", "ris_step1"}
    resumed = run_curriculum(
        config, datasets, str(tmp_path / "split"), resume=partial.checkpoints["ris_step1"]
    )
    assert set(resumed.checkpoints) == {"ris_step2", "round1"}
    assert np.array_equal(resumed.generator.parameter_vector(), oneshot.generator.parameter_vector())


def test_random_select_mode_is_plumbed_through(datasets, tmp_path):
    config = tiny_config(select_mode="random")
    result = run_curriculum(config, datasets, str(tmp_path / "run"))
    assert all(row["included"] for row in result.select_rows["select0"])
    assert len(result.select_rows["select0"]) == len(datasets["H_ref"])


def test_run_rejects_preselected_h_ref(datasets, tmp_path):
    config = tiny_config()
    gen = fresh_generator(config)
    selected, _ = select_referents(gen, datasets["H_ref"], tau_select=0.0)
    bad = dict(datasets, H_ref=selected)
    with pytest.raises(ValidationError):
        run_curriculum(config, bad, str(tmp_path / "run"))


def test_stop_after_semantic_writes_no_final(datasets, tmp_path):
    config = tiny_config()
    result = run_curriculum(config, datasets, str(tmp_path / "run"), stop_after="semantic")
    assert set(result.checkpoints) == {"semantic"}
    assert result.final_path == ""
    assert not os.path.exists(tmp_path / "run" / "theta_final.ckpt")
