"""Staged training schedule: semantic alignment, RIS learning, refinement.

The schedule runs four kinds of training stage over the four sample
sources:

    semantic    {D_sem, H_sem}                 warm start on score-1 data
    ris_step1   {D_sem, H_sem, D_ref}          learn referent discrimination
    ris_step2   {D_sem, H_sem, D_ref, H_ref'}  add selected target samples
    refine      {H_sem, H_ref^(i)} only        per-round target fine-tune

Select promotes one candidate per ambiguous target sample using the
current model (top-confidence prediction, max-IoU candidate, gated by a
threshold) and always runs against the original unselected H_ref, so a
bad round cannot poison later ones.  Every checkpoint and selected
manifest version is persisted under the run directory, and a run can
resume from any stage-boundary checkpoint with an identical result.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch

from .decoders import ToyNestedRegionDecoder
from .encoders import EncoderConfig, SyntheticEncoder
from .errors import ValidationError
from .factory import Sample, validate_sample, write_manifest
from .generator import GeneratorConfig, PointGenerator, load_checkpoint, save_checkpoint
from .masks import iou
from .matching import LossWeights, total_loss

STAGE_DATASETS = {
    "semantic": ("D_sem", "H_sem"),
    "ris_step1": ("D_sem", "H_sem", "D_ref"),
    "ris_step2": ("D_sem", "H_sem", "D_ref", "H_ref"),
    "refine": ("H_sem", "H_ref"),
}

SELECT_MODES = ("model", "random")


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class CurriculumConfig:
    """Everything a full run needs, JSON-serializable for the CLI.

    Defaults mirror the full-scale schedule (10 semantic epochs, 30 RIS
    epochs split 15/15, 10 single-epoch refinement rounds) at desk-scale
    optimization settings (batch 8, lr 0.003).
    """

    # model dimensions
    n_stages: int = 2
    feat_dim: int = 64
    n_queries: int = 16
    n_points: int = 12
    head_hidden: int | None = None
    positional_keys: bool = False
    strides: tuple[int, ...] = (4, 8)
    token_dim: int = 32
    class_vocab_size: int = 16
    text_positional: bool = True
    # loss weights
    lambda_mask: float = 1.0
    lambda_pt: float = 1.0
    lambda_conf: float = 1.0
    lambda_noobj: float = 1.0
    # schedule
    epochs_semantic: int = 10
    epochs_ris1: int = 15
    epochs_ris2: int = 15
    refine_rounds: int = 10
    epochs_per_round: int = 1
    tau_select: float = 0.5
    select_mode: str = "model"
    # optimization
    batch_size: int = 8
    lr: float = 0.003
    grad_clip: float | None = None  # max gradient norm; None disables clipping
    seed: int = 0
    # dataset manifest paths, filled in by the data-building CLI
    manifests: dict = field(default_factory=dict)
    # where the training CLI writes checkpoints, selection manifests, logs
    run_dir: str = "runs/ppt"

    def __post_init__(self) -> None:
        if self.select_mode not in SELECT_MODES:
            raise ValidationError(f"select_mode must be one of {SELECT_MODES}")
        if not (0.0 <= self.tau_select <= 1.0):
            raise ValidationError("tau_select must lie in [0, 1]")
        for name in ("epochs_semantic", "epochs_ris1", "epochs_ris2", "refine_rounds", "epochs_per_round"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be nonnegative")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be positive")
        if self.lr <= 0:
            raise ValidationError("lr must be positive")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValidationError("grad_clip must be positive when set")
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        # fail fast on inconsistent model dimensions
        self.generator_config()
        self.encoder_config()

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(
            n_stages=self.n_stages,
            feat_dim=self.feat_dim,
            n_queries=self.n_queries,
            n_points=self.n_points,
            head_hidden=self.head_hidden,
            positional_keys=self.positional_keys,
        )

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            n_stages=self.n_stages,
            feat_dim=self.feat_dim,
            strides=self.strides,
            class_vocab_size=self.class_vocab_size,
            token_dim=self.token_dim,
            seed=self.seed,
            text_positional=self.text_positional,
        )

    def weights(self) -> LossWeights:
        return LossWeights(
            lambda_mask=self.lambda_mask,
            lambda_pt=self.lambda_pt,
            lambda_conf=self.lambda_conf,
            lambda_noobj=self.lambda_noobj,
        )

    def to_dict(self) -> dict:
        data = asdict(self)
        data["strides"] = list(self.strides)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "CurriculumConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown config fields: {sorted(unknown)}")
        if "strides" in data:
            data = dict(data, strides=tuple(data["strides"]))
        return cls(**data)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "CurriculumConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(data)


def _derived_seed(base: int, index: int) -> int:
    """Stable per-stage seed so any stage reruns identically in isolation."""
    return int(np.random.SeedSequence([base, index]).generate_state(1)[0])


_STAGE_SEED_INDEX = {"semantic": 1, "ris_step1": 2, "ris_step2": 3}


@dataclass(frozen=True)
class StagePlan:
    stage: str
    sources: tuple[str, ...]
    epochs: int
    seed: int

    def __post_init__(self) -> None:
        if self.stage not in STAGE_DATASETS:
            raise ValidationError(f"unknown stage {self.stage!r}")
        if tuple(self.sources) != STAGE_DATASETS[self.stage]:
            raise ValidationError(
                f"stage {self.stage} must train on {STAGE_DATASETS[self.stage]}, got {self.sources}"
            )
        if self.epochs < 0:
            raise ValidationError("epochs must be nonnegative")


def stage_plan(stage: str, config: CurriculumConfig, round_index: int | None = None) -> StagePlan:
    if stage == "refine":
        if round_index is None or round_index < 1:
            raise ValidationError("refine plans need a round index >= 1")
        return StagePlan("refine", STAGE_DATASETS["refine"], config.epochs_per_round, _derived_seed(config.seed, 100 + round_index))
    epochs = {
        "semantic": config.epochs_semantic,
        "ris_step1": config.epochs_ris1,
        "ris_step2": config.epochs_ris2,
    }[stage]
    return StagePlan(stage, STAGE_DATASETS[stage], epochs, _derived_seed(config.seed, _STAGE_SEED_INDEX[stage]))


# ---------------------------------------------------------------------------
# training


def _cached_inputs(generator: PointGenerator, sample: Sample, cache: dict):
    entry = cache.get(sample.sample_id)
    if entry is None:
        features = generator.encoder.extract_features(sample.scene, sample.expression)
        context = generator.decoder.make_context(sample.scene)
        cache[sample.sample_id] = entry = (features, context)
    return entry


def _check_batch_discipline(plan: StagePlan, batch: list[Sample]) -> None:
    for sample in batch:
        if sample.source not in plan.sources:
            raise ValidationError(
                f"stage {plan.stage} drew a {sample.source} sample ({sample.sample_id})"
            )
        if plan.stage == "refine" and sample.source.startswith("D_"):
            raise ValidationError(
                f"refine stage must never draw object-centric samples, got {sample.sample_id}"
            )


def train_stage(
    generator: PointGenerator,
    plan: StagePlan,
    datasets: dict[str, list[Sample]],
    config: CurriculumConfig,
    cache: dict | None = None,
    log_rows: list[dict] | None = None,
) -> list[float]:
    """Optimize the generator in place; returns per-epoch mean losses.

    A fresh optimizer is built per stage (parameter warm start only).
    Batches draw uniformly from the union of the plan's sources; zero
    epochs leave the parameters untouched.
    """
    missing = [src for src in plan.sources if src not in datasets]
    if missing:
        raise ValidationError(f"stage {plan.stage} is missing datasets {missing}")
    union = [sample for src in plan.sources for sample in datasets[src]]
    if not union:
        raise ValidationError(f"stage {plan.stage} has an empty dataset union")
    if plan.epochs == 0:
        return []

    cache = cache if cache is not None else {}
    weights = config.weights()
    optimizer = torch.optim.Adam(generator.parameters(), lr=config.lr)
    rng = np.random.default_rng(plan.seed)
    epoch_losses: list[float] = []
    for epoch in range(plan.epochs):
        order = rng.permutation(len(union))
        running = 0.0
        seen = 0
        for start in range(0, len(union), config.batch_size):
            batch = [union[int(i)] for i in order[start : start + config.batch_size]]
            _check_batch_discipline(plan, batch)
            optimizer.zero_grad()
            batch_loss = torch.zeros((), dtype=torch.float64)
            for sample in batch:
                features, context = _cached_inputs(generator, sample, cache)
                preds = generator.forward(sample.scene, sample.expression, features=features, context=context)
                result = total_loss(preds, sample.candidates, weights)
                batch_loss = batch_loss + result.total
            batch_loss = batch_loss / len(batch)
            if not torch.isfinite(batch_loss):
                raise RuntimeError(
                    f"non-finite loss in stage {plan.stage}, epoch {epoch}, "
                    f"batch starting at {start} (samples {[s.sample_id for s in batch]})"
                )
            batch_loss.backward()
            if config.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(generator.parameters(), config.grad_clip)
            optimizer.step()
            running += float(batch_loss.detach()) * len(batch)
            seen += len(batch)
        epoch_losses.append(running / seen)
        if log_rows is not None:
            log_rows.append({"stage": plan.stage, "epoch": epoch, "loss": epoch_losses[-1]})
    return epoch_losses


# ---------------------------------------------------------------------------
# pseudo-referent selection


def select_referents(
    generator: PointGenerator,
    samples: list[Sample],
    tau_select: float = 0.5,
    mode: str = "model",
    rng: np.random.Generator | None = None,
    cache: dict | None = None,
) -> tuple[list[Sample], list[dict]]:
    """Promote one candidate per ambiguous sample to pseudo-referent.

    Model mode decodes the top-confidence prediction and picks the
    candidate with the highest IoU against it, dropping the sample when
    that agreement falls below tau_select.  Random mode (an ablation)
    picks uniformly and keeps everything.  Inputs are never mutated;
    excluded samples simply do not appear in the output.
    """
    if mode not in SELECT_MODES:
        raise ValidationError(f"selection mode must be one of {SELECT_MODES}")
    if mode == "random" and rng is None:
        raise ValidationError("random selection needs an rng")
    cache = cache if cache is not None else {}
    selected: list[Sample] = []
    rows: list[dict] = []
    for sample in samples:
        if sample.source != "H_ref":
            raise ValidationError(f"Select expects H_ref samples, got {sample.source}")
        if any(c.score != 0.0 for c in sample.candidates):
            raise ValidationError(f"sample {sample.sample_id} was already selected")
        if mode == "model":
            features, context = _cached_inputs(generator, sample, cache)
            with torch.no_grad():
                preds = generator.forward(sample.scene, sample.expression, features=features, context=context)
            confidences = np.array([p.confidence for p in preds])
            top = preds[int(np.argmax(confidences))]
            ious = np.array([iou(top.mask, c.mask) for c in sample.candidates])
            pick = int(np.argmax(ious))
            agreement = float(ious[pick])
            included = agreement >= tau_select
        else:
            pick = int(rng.integers(sample.n_candidates))
            agreement = None
            included = True
        rows.append(
            {
                "sample_id": sample.sample_id,
                "picked": pick if included else None,
                "iou": agreement,
                "included": included,
            }
        )
        if included:
            candidates = [replace(c, score=1.0 if e == pick else 0.0) for e, c in enumerate(sample.candidates)]
            promoted = replace(sample, candidates=candidates)
            validate_sample(promoted, check_geometry=False)
            selected.append(promoted)
    return selected, rows


def selection_accuracy(samples: list[Sample], rows: list[dict]) -> float:
    """Fraction of included samples whose pick matches the ground truth."""
    by_id = {s.sample_id: s for s in samples}
    correct = 0
    counted = 0
    for row in rows:
        if not row["included"]:
            continue
        sample = by_id[row["sample_id"]]
        if sample.gt_mask is None:
            continue
        counted += 1
        if sample.candidates[row["picked"]].mask == sample.gt_mask:
            correct += 1
    if counted == 0:
        raise ValidationError("no included samples with ground truth to score")
    return correct / counted


# ---------------------------------------------------------------------------
# full schedule


_CHECKPOINT_NAMES = {
    "semantic": "theta_sem.ckpt",
    "ris_step1": "theta_refD.ckpt",
    "ris_step2": "theta_ref.ckpt",
}

# CLI stage names to the internal stage at whose boundary to stop
STOP_POINTS = {"semantic": "semantic", "ris1": "ris_step1", "ris2": "ris_step2", "refine": None, "all": None}


@dataclass
class CurriculumResult:
    final_path: str
    checkpoints: dict[str, str]
    manifests: dict[str, str]
    epoch_losses: dict[str, list[float]]
    select_rows: dict[str, list[dict]]
    generator: PointGenerator


def _checkpoint_name(stage: str) -> str:
    return _CHECKPOINT_NAMES.get(stage, f"theta_{stage}.ckpt")


def run_curriculum(
    config: CurriculumConfig,
    datasets: dict[str, list[Sample]],
    run_dir: str,
    resume: str | None = None,
    stop_after: str | None = None,
) -> CurriculumResult:
    """Execute the schedule end to end, persisting every artifact.

    datasets maps the four source tags to sample lists; H_ref must be
    unselected (all candidate scores zero).  resume takes a checkpoint
    written by a previous run; training continues after the stage that
    checkpoint recorded, and deterministic re-selection reproduces any
    intermediate manifests, so the final parameters match an
    uninterrupted run seed for seed.  stop_after names the internal
    stage ("semantic", "ris_step1", "ris_step2", "round<i>") after
    whose boundary to halt.
    """
    for key in ("D_sem", "D_ref", "H_sem", "H_ref"):
        if key not in datasets:
            raise ValidationError(f"datasets is missing {key!r}")
    for sample in datasets["H_ref"]:
        if any(c.score != 0.0 for c in sample.candidates):
            raise ValidationError("run_curriculum needs the unselected H_ref")

    os.makedirs(run_dir, exist_ok=True)
    encoder = SyntheticEncoder(config.encoder_config())
    decoder = ToyNestedRegionDecoder()

    stages = ["semantic", "ris_step1", "ris_step2"] + [f"round{i}" for i in range(1, config.refine_rounds + 1)]
    done_index = -1
    if resume is not None:
        generator, extra = load_checkpoint(resume, encoder, decoder)
        if generator.config != config.generator_config():
            raise ValidationError("resume checkpoint was trained with a different generator configuration")
        recorded = extra.get("stage")
        if recorded not in stages:
            raise ValidationError(f"checkpoint {resume} does not name a resumable stage (got {recorded!r})")
        done_index = stages.index(recorded)
    else:
        generator = PointGenerator(config.generator_config(), encoder, decoder, init_seed=config.seed)

    cache: dict = {}
    checkpoints: dict[str, str] = {}
    manifests: dict[str, str] = {}
    epoch_losses: dict[str, list[float]] = {}
    select_rows: dict[str, list[dict]] = {}
    log_path = os.path.join(run_dir, "runlog.jsonl")

    def log(row: dict) -> None:
        with open(log_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(row, sort_keys=True) + "\n")

    def run_select(round_index: int) -> list[Sample]:
        tag = f"select{round_index}"
        rng = None
        if config.select_mode == "random":
            rng = np.random.default_rng(_derived_seed(config.seed, 200 + round_index))
        chosen, rows = select_referents(
            generator,
            datasets["H_ref"],
            tau_select=config.tau_select,
            mode=config.select_mode,
            rng=rng,
            cache=cache,
        )
        select_rows[tag] = rows
        path = os.path.join(run_dir, f"h_ref_round{round_index}.jsonl")
        write_manifest(chosen, path)
        manifests[tag] = path
        log({"stage": tag, "included": len(chosen), "total": len(datasets["H_ref"])})
        return chosen

    stopped_early = False
    last_stage = stages[done_index] if done_index >= 0 else "init"
    for index in range(done_index + 1, len(stages)):
        stage = stages[index]
        if stage.startswith("round"):
            round_index = int(stage[len("round") :])
            selected = run_select(round_index)
            plan = stage_plan("refine", config, round_index=round_index)
            stage_datasets = {"H_sem": datasets["H_sem"], "H_ref": selected}
        elif stage == "ris_step2":
            selected = run_select(0)
            plan = stage_plan(stage, config)
            stage_datasets = dict(datasets, H_ref=selected)
        else:
            plan = stage_plan(stage, config)
            stage_datasets = datasets

        rows: list[dict] = []
        epoch_losses[stage] = train_stage(generator, plan, stage_datasets, config, cache=cache, log_rows=rows)
        for row in rows:
            log(row)
        path = os.path.join(run_dir, _checkpoint_name(stage))
        save_checkpoint(generator, path, extra={"stage": stage, "curriculum": config.to_dict()})
        checkpoints[stage] = path
        last_stage = stage
        if stop_after == stage and index < len(stages) - 1:
            stopped_early = True
            break

    final_path = ""
    if not stopped_early:
        final_path = os.path.join(run_dir, "theta_final.ckpt")
        save_checkpoint(generator, final_path, extra={"stage": last_stage, "curriculum": config.to_dict()})
    return CurriculumResult(
        final_path=final_path,
        checkpoints=checkpoints,
        manifests=manifests,
        epoch_losses=epoch_losses,
        select_rows=select_rows,
        generator=generator,
    )
