"""Command-line interface.

Five subcommands cover the whole workflow: build a synthetic corpus, train
the point generator through the staged curriculum, run referent selection on
a weak manifest, score a checkpoint against a labeled manifest, and segment
a single scene/expression pair.

Exit codes: 0 on success, 2 when inputs fail validation (bad flags included,
via argparse), 3 when a run fails at runtime.  Setting the environment
variable PPT_SEED to an integer overrides every seed, so a pipeline can be
re-run bit for bit without editing configs.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

from .curriculum import (
    STOP_POINTS,
    CurriculumConfig,
    _derived_seed,
    run_curriculum,
    select_referents,
)
from .decoders import ToyNestedRegionDecoder
from .encoders import SyntheticEncoder
from .errors import ValidationError
from .evaluate import evaluate, infer_prediction, write_overlay
from .factory import (
    CorpusParams,
    build_dref_corpus,
    build_dsem_corpus,
    build_eval_corpus,
    build_h_corpus,
    partition,
    read_manifest,
    write_manifest,
)
from .generator import PointGenerator, load_checkpoint
from .masks import encode_mask
from .world import parse_expression, scene_from_json

ENV_SEED = "PPT_SEED"

TRAIN_SOURCES = ("D_sem", "D_ref", "H_sem", "H_ref")


def _seed_override(seed: int) -> int:
    raw = os.environ.get(ENV_SEED)
    if raw is None:
        return seed
    try:
        return int(raw)
    except ValueError:
        raise ValidationError(f"{ENV_SEED} must be an integer, got {raw!r}") from None


def _load_generator(ckpt: str) -> tuple[PointGenerator, CurriculumConfig]:
    """Rebuild a bound generator from a training checkpoint.

    Checkpoints written by ``ppt train`` embed the curriculum configuration,
    which pins down the frozen encoder; without it the parameters alone do
    not determine the model's behavior.
    """
    generator, extra = load_checkpoint(ckpt)
    recorded = extra.get("curriculum")
    if not isinstance(recorded, dict):
        raise ValidationError(
            f"checkpoint {ckpt} does not embed a training configuration; use one written by 'ppt train'"
        )
    config = CurriculumConfig.from_dict(recorded)
    generator.bind(SyntheticEncoder(config.encoder_config()), ToyNestedRegionDecoder())
    return generator, config


# ---------------------------------------------------------------------------
# subcommands


def _cmd_build_data(args: argparse.Namespace) -> int:
    seed = _seed_override(args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    params = CorpusParams()

    d_sem = build_dsem_corpus(args.n_sem, _derived_seed(seed, 11), params)
    d_ref = build_dref_corpus(args.n_ref, _derived_seed(seed, 12), params)
    h_all = build_h_corpus(args.n_ris, _derived_seed(seed, 13), params)
    h_sem, h_ref = partition(h_all)
    n_eval = max(1, args.n_ris // 5)
    held_out = build_eval_corpus(n_eval, _derived_seed(seed, 14), params)

    paths = {}
    for name, rows in (
        ("D_sem", d_sem),
        ("D_ref", d_ref),
        ("H_sem", h_sem),
        ("H_ref", h_ref),
        ("eval", held_out),
    ):
        path = out / f"{name.lower()}.jsonl"
        write_manifest(rows, str(path))
        paths[name] = str(path)
        print(f"wrote {len(rows):5d} samples to {path}")

    config = CurriculumConfig(
        n_points=params.n_points,
        class_vocab_size=params.class_vocab_size,
        seed=seed,
        manifests={k: paths[k] for k in TRAIN_SOURCES},
        run_dir=str(out / "run"),
    )
    config_path = out / "config.json"
    config_path.write_text(config.to_json() + "\n")
    print(f"wrote training config to {config_path}")
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    config = CurriculumConfig.from_json(Path(args.config).read_text())
    seed = _seed_override(config.seed)
    if seed != config.seed:
        config = replace(config, seed=seed)
    missing = [k for k in TRAIN_SOURCES if k not in config.manifests]
    if missing:
        raise ValidationError(f"config.manifests is missing {missing}")
    datasets = {k: read_manifest(config.manifests[k]) for k in TRAIN_SOURCES}
    result = run_curriculum(
        config,
        datasets,
        config.run_dir,
        resume=args.resume,
        stop_after=STOP_POINTS[args.stage],
    )
    for stage, path in result.checkpoints.items():
        print(f"stage {stage}: {path}")
    if result.final_path:
        print(f"final checkpoint: {result.final_path}")
    else:
        print(f"stopped after stage {args.stage}; resume with --resume")
    return 0


def _cmd_select(args: argparse.Namespace) -> int:
    samples = read_manifest(args.manifest)
    generator, _ = _load_generator(args.ckpt)
    selected, rows = select_referents(generator, samples, tau_select=args.tau)
    write_manifest(selected, args.out)
    print(f"kept {len(selected)} of {len(rows)} samples at tau={args.tau} -> {args.out}")
    return 0


def _cmd_evaluate(args: argparse.Namespace) -> int:
    samples = read_manifest(args.manifest)
    generator, _ = _load_generator(args.ckpt)
    report = evaluate(generator, samples)
    Path(args.report).write_text(report.to_json() + "\n")
    p_at = " ".join(f"P@{t}={report.precision_at[t]:.4f}" for t in sorted(report.precision_at))
    print(f"mIoU={report.miou:.4f} {p_at} n={report.n_samples} -> {args.report}")
    return 0


def _cmd_infer(args: argparse.Namespace) -> int:
    generator, _ = _load_generator(args.ckpt)
    scene = scene_from_json(Path(args.scene).read_text())
    expression = parse_expression(args.expr)
    prediction = infer_prediction(generator, scene, expression)
    Path(args.out_mask).write_text(encode_mask(prediction.mask) + "\n")
    print(f"confidence={prediction.confidence:.4f} area={prediction.mask.area} -> {args.out_mask}")
    if args.overlay:
        write_overlay(args.overlay, scene, pred_mask=prediction.mask, prompt=prediction.prompt)
        print(f"overlay -> {args.overlay}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ppt", description=__doc__.strip().splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-data", help="generate synthetic training and evaluation manifests")
    p.add_argument("--world", choices=["synthetic"], default="synthetic")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-sem", type=int, default=500, help="class-supervised samples")
    p.add_argument("--n-ref", type=int, default=500, help="derived referring samples")
    p.add_argument("--n-ris", type=int, default=500, help="weak referring samples (split by expression)")
    p.set_defaults(func=_cmd_build_data)

    p = sub.add_parser("train", help="run the staged curriculum")
    p.add_argument("--config", required=True, help="training config JSON")
    p.add_argument("--stage", choices=sorted(STOP_POINTS), default="all")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("select", help="pick referents on a weak manifest with a trained checkpoint")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--tau", type=float, default=0.5, help="inclusion threshold on candidate IoU")
    p.add_argument("--out", required=True, help="output manifest")
    p.set_defaults(func=_cmd_select)

    p = sub.add_parser("evaluate", help="score a checkpoint against a labeled manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--report", required=True, help="output report JSON")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("infer", help="segment one expression in one scene")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scene", required=True, help="scene JSON file")
    p.add_argument("--expr", required=True, help="referring expression text")
    p.add_argument("--out-mask", required=True, help="output mask (run-length text)")
    p.add_argument("--overlay", default=None, help="optional overlay PNG")
    p.set_defaults(func=_cmd_infer)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary maps failures to exit 3
        print(f"failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
