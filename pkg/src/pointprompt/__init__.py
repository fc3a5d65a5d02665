"""Point-prompt generation for weakly supervised referring segmentation.

The package trains a small set-prediction head that turns frozen
text/image features into point prompts for a frozen promptable mask
decoder.  Everything runs at desk scale against a deterministic
synthetic world so the full curriculum is testable on a laptop CPU.
"""

__version__ = "0.1.0"

from .errors import InfeasibleError, ValidationError
from .masks import BitMask, Box, SoftMask, bbox_of, bce_loss, decode_mask, dice_loss, encode_mask, iou
from .world import (
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
)
from .encoders import EncoderConfig, StageFeatures, SyntheticEncoder
from .prompts import PointPrompt, PseudoLabel
from .decoders import PromptableDecoder, RasterContext, ToyNestedRegionDecoder
from .matching import LossWeights, Prediction, hungarian, total_loss
from .generator import GeneratorConfig, PointGenerator, load_checkpoint, save_checkpoint
from .factory import (
    CorpusParams,
    Sample,
    build_dref_corpus,
    build_dsem_corpus,
    build_eval_corpus,
    build_h_corpus,
    build_semantic_sample,
    check_prompt_geometry,
    compose_mosaic,
    extract_ris_pseudolabels,
    fuse_embed,
    partition,
    read_manifest,
    sample_prompt_points,
    validate_sample,
    write_manifest,
)
from .curriculum import (
    STAGE_DATASETS,
    CurriculumConfig,
    CurriculumResult,
    StagePlan,
    run_curriculum,
    select_referents,
    selection_accuracy,
    stage_plan,
    train_stage,
)
from .evaluate import MetricsReport, evaluate, infer, infer_prediction, write_overlay

__all__ = [
    "STAGE_DATASETS",
    "CurriculumConfig",
    "CurriculumResult",
    "MetricsReport",
    "StagePlan",
    "evaluate",
    "infer",
    "infer_prediction",
    "run_curriculum",
    "select_referents",
    "selection_accuracy",
    "stage_plan",
    "train_stage",
    "write_overlay",
    "BitMask",
    "Box",
    "SoftMask",
    "CorpusParams",
    "EncoderConfig",
    "Expression",
    "GeneratorConfig",
    "InfeasibleError",
    "LossWeights",
    "PointGenerator",
    "PointPrompt",
    "Prediction",
    "PromptableDecoder",
    "PseudoLabel",
    "RasterContext",
    "Region",
    "Sample",
    "SceneSpec",
    "Shape",
    "StageFeatures",
    "SyntheticEncoder",
    "ToyNestedRegionDecoder",
    "ValidationError",
    "WorldParams",
    "bbox_of",
    "bce_loss",
    "build_dref_corpus",
    "build_dsem_corpus",
    "build_eval_corpus",
    "build_h_corpus",
    "build_semantic_sample",
    "check_prompt_geometry",
    "compose_mosaic",
    "decode_mask",
    "dice_loss",
    "encode_mask",
    "expression_referents",
    "extract_ris_pseudolabels",
    "flip_scene",
    "fuse_embed",
    "generate_scene",
    "hungarian",
    "iou",
    "load_checkpoint",
    "parse_expression",
    "partition",
    "read_manifest",
    "realize_expression",
    "region_mask",
    "render_labelmap",
    "sample_prompt_points",
    "save_checkpoint",
    "total_loss",
    "validate_sample",
    "write_manifest",
    "__version__",
]
