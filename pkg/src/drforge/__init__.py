"""drforge: reinforced image-text dataset generation and distilled
contrastive training at desk scale.

The pipeline has two halves.  Generation draws a synthetic image-text world,
fits frozen linear teachers, and writes reinforced shards: raw samples plus
stored augmentation parameters, teacher embeddings (BF16), and synthetic
captions.  Training replays the stored views and optimizes a linear student
with a lambda-mixed contrastive + ensemble-distillation loss, entirely from
the shard contents, so each step costs the same with or without
distillation.
"""

from .ablations import (
    EfficiencyCurves,
    OverheadReport,
    SweepResult,
    caption_count_ablation,
    compare_ensembles,
    efficiency_curve,
    overhead_bench,
    sweep_logit_scale,
)
from .augment import (
    AugmentationParams,
    AugmentedImage,
    apply,
    draw_params,
    identity_params,
    pack_params,
    replay,
    unpack_params,
)
from .coordinator import (
    CaptionerSpec,
    GenerationJob,
    GenerationReport,
    TeacherSpec,
    generate_shard,
    plan,
    prepare,
    run,
    verify,
)
from .encoders import (
    CaptionerModel,
    StudentModel,
    TeacherModel,
    avgpool,
    fit_teacher,
    load_model,
    save_model,
)
from .kernels import bf16_decode, bf16_encode, kl_rows, l2_normalize_rows, softmax_rows
from .losses import (
    BatchEmbeddings,
    LossConfig,
    LossReport,
    caption_term_expansion,
    clip_loss,
    distill_loss,
    grad_check,
    total_loss,
)
from .manifest import Manifest, ShardEntry
from .shards import (
    ReinforcedRecord,
    ShardHeader,
    TeacherInfo,
    inspect,
    read_shard,
    record_size,
    write_shard,
)
from .trainer import EvalReport, TrainConfig, TrainResult, evaluate, train
from .world import Sample, World, WorldConfig, build_world, draw_samples, zero_shot_prompts

__version__ = "0.1.0"

__all__ = [
    "AugmentationParams",
    "AugmentedImage",
    "BatchEmbeddings",
    "CaptionerModel",
    "CaptionerSpec",
    "EfficiencyCurves",
    "EvalReport",
    "GenerationJob",
    "GenerationReport",
    "LossConfig",
    "LossReport",
    "Manifest",
    "OverheadReport",
    "ReinforcedRecord",
    "Sample",
    "ShardEntry",
    "ShardHeader",
    "StudentModel",
    "SweepResult",
    "TeacherInfo",
    "TeacherModel",
    "TeacherSpec",
    "TrainConfig",
    "TrainResult",
    "World",
    "WorldConfig",
    "apply",
    "avgpool",
    "bf16_decode",
    "bf16_encode",
    "build_world",
    "caption_count_ablation",
    "caption_term_expansion",
    "clip_loss",
    "compare_ensembles",
    "distill_loss",
    "draw_params",
    "draw_samples",
    "efficiency_curve",
    "evaluate",
    "fit_teacher",
    "generate_shard",
    "grad_check",
    "identity_params",
    "inspect",
    "kl_rows",
    "l2_normalize_rows",
    "load_model",
    "overhead_bench",
    "pack_params",
    "plan",
    "prepare",
    "read_shard",
    "record_size",
    "replay",
    "run",
    "save_model",
    "softmax_rows",
    "sweep_logit_scale",
    "total_loss",
    "train",
    "unpack_params",
    "verify",
    "write_shard",
    "zero_shot_prompts",
]
