import os

import pytest

from drforge.coordinator import CaptionerSpec, GenerationJob, TeacherSpec, run
from drforge.encoders import fit_teacher
from drforge.world import WorldConfig, build_world

SMALL_WORLD_CONFIG = WorldConfig(num_classes=4, image_side=16, caption_dim=8, seed=3)
NOISELESS_WORLD_CONFIG = WorldConfig(
    num_classes=4,
    image_side=16,
    caption_dim=8,
    pixel_noise_sigma=0.0,
    caption_noise_sigma=0.0,
    seed=3,
)


@pytest.fixture(scope="session")
def small_world():
    return build_world(SMALL_WORLD_CONFIG)


@pytest.fixture(scope="session")
def noiseless_world():
    return build_world(NOISELESS_WORLD_CONFIG)


@pytest.fixture(scope="session")
def default_world():
    return build_world(WorldConfig())


@pytest.fixture(scope="session")
def small_teachers(small_world):
    t_a = fit_teacher("t_a", d_k=8, ridge_lambda=1e-3, world=small_world, n_samples=512)
    t_b = fit_teacher(
        "t_b", d_k=6, ridge_lambda=1e-3, world=small_world, logit_scale=60.0, n_samples=512
    )
    return t_a, t_b


def tiny_job(output_dir: str, parallelism: int = 2, **overrides) -> GenerationJob:
    kwargs = dict(
        world=SMALL_WORLD_CONFIG,
        teachers=(
            TeacherSpec("t_a", d_k=8, ridge_lambda=1e-3, logit_scale=70.0, n_fit_samples=512),
            TeacherSpec("t_b", d_k=6, ridge_lambda=1e-3, logit_scale=60.0, n_fit_samples=512),
        ),
        captioner=CaptionerSpec(
            captioner_id="cap", backbone_teacher_id="t_a", caption_noise_sigma=0.05, seed=1
        ),
        num_augmentations=2,
        num_synthetic_captions=2,
        samples_per_shard=64,
        num_shards=3,
        output_dir=output_dir,
        parallelism=parallelism,
    )
    kwargs.update(overrides)
    return GenerationJob(**kwargs)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """A small generated dataset (3 shards x 64 samples, A=2, N=2, K=2)."""
    directory = str(tmp_path_factory.mktemp("tiny_dataset"))
    job = tiny_job(directory)
    run(job)
    return {
        "dir": directory,
        "job": job,
        "manifest": os.path.join(directory, "manifest.json"),
    }
