"""Canonical configurations shared by the test suite and the calibration
script.  The pinned values in _pins.py were measured with exactly these
settings; change them only together with a re-calibration run.
"""

from __future__ import annotations

import os

from drforge.coordinator import CaptionerSpec, GenerationJob, TeacherSpec
from drforge.losses import LossConfig
from drforge.trainer import TrainConfig
from drforge.world import WorldConfig

# The reference dataset: default world, two teachers at the (70, 60) logit
# scales, two stored augmentations, five synthetic captions, 16 x 256 samples.
REFERENCE_TEACHERS = (
    dict(teacher_id="teacher_a", d_k=16, ridge_lambda=1e-3, logit_scale=70.0, n_fit_samples=2048),
    dict(teacher_id="teacher_b", d_k=12, ridge_lambda=1e-3, logit_scale=60.0, n_fit_samples=2048),
)
REFERENCE_SHARDS = 16
REFERENCE_SAMPLES_PER_SHARD = 256
REFERENCE_TRAIN_SAMPLES = REFERENCE_SHARDS * REFERENCE_SAMPLES_PER_SHARD


def reference_world_config() -> WorldConfig:
    return WorldConfig()


def reference_job(output_dir: str, parallelism: int = 4) -> GenerationJob:
    return GenerationJob(
        world=reference_world_config(),
        teachers=tuple(TeacherSpec(**kw) for kw in REFERENCE_TEACHERS),
        captioner=CaptionerSpec(
            captioner_id="captioner",
            backbone_teacher_id="teacher_a",
            caption_noise_sigma=0.05,
            seed=1,
        ),
        num_augmentations=2,
        num_synthetic_captions=5,
        samples_per_shard=REFERENCE_SAMPLES_PER_SHARD,
        num_shards=REFERENCE_SHARDS,
        output_dir=output_dir,
        parallelism=parallelism,
    )


def manifest_path(dataset_dir: str) -> str:
    return os.path.join(dataset_dir, "manifest.json")


def kd_train_config(dataset_dir: str, distill_weight: float, **overrides) -> TrainConfig:
    """The KD-gain configuration: 2000 steps, batch 64, ground-truth caption
    only, stored teacher scales."""
    kwargs = dict(
        loss=LossConfig(distill_weight=distill_weight),
        batch_size=64,
        steps=2000,
        learning_rate=0.5,
        lr_schedule="cosine",
        warmup_steps=100,
        seed=0,
        data_manifest=manifest_path(dataset_dir),
        eval_samples=512,
        retrieval_samples=256,
    )
    kwargs.update(overrides)
    return TrainConfig(**kwargs)


def plain_train_config(**overrides) -> TrainConfig:
    """Unreinforced baseline over the same sample budget as the reference
    dataset."""
    kwargs = dict(
        loss=LossConfig(distill_weight=0.0),
        batch_size=64,
        steps=2000,
        learning_rate=0.5,
        lr_schedule="cosine",
        warmup_steps=100,
        seed=0,
        unreinforced=True,
        world=reference_world_config(),
        train_samples=REFERENCE_TRAIN_SAMPLES,
        eval_samples=512,
        retrieval_samples=256,
    )
    kwargs.update(overrides)
    return TrainConfig(**kwargs)


def ablation_train_config(dataset_dir: str, **overrides) -> TrainConfig:
    """Shorter budget used for the sweep and caption ablations."""
    kwargs = dict(
        loss=LossConfig(distill_weight=1.0),
        batch_size=64,
        steps=800,
        learning_rate=0.5,
        lr_schedule="cosine",
        warmup_steps=100,
        seed=0,
        data_manifest=manifest_path(dataset_dir),
        eval_samples=512,
        retrieval_samples=256,
    )
    kwargs.update(overrides)
    return TrainConfig(**kwargs)


def caption_train_config(dataset_dir: str, **overrides) -> TrainConfig:
    """Caption-count ablation runs with the contrastive loss alone.  Stored
    synthetic captions are near-noiseless while the ground-truth captions are
    heavily corrupted, so pure CLIP training is where extra caption slots
    show their value; any distillation weight masks the effect."""
    kwargs = dict(loss=LossConfig(distill_weight=0.0))
    kwargs.update(overrides)
    return ablation_train_config(dataset_dir, **kwargs)


SWEEP_GRID = (10.0, 40.0, 70.0, 100.0, 130.0)
CAPTION_GRID = (0, 1, 2, 5)
EFFICIENCY_CHECKPOINTS = tuple(range(200, 2001, 200))
