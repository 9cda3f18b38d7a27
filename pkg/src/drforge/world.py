"""Deterministic synthetic image-text benchmark.

A world is a bank of C image prototypes (soft blob constellations plus a weak
class-specific intensity ramp, values in [0, 1]) and C unit-norm caption
prototypes.  Every sample of every split is a pure function of
(seed, split, index), so two processes generate byte-identical data and any
sample can be produced in isolation.

The ramp term matters: it gives every class a global low-frequency signature
that survives aggressive crops, while the blob constellation keeps prototype
rasters nearly disjoint (pairwise cosine below 0.5 without any centering).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import rng
from .kernels import l2_normalize_rows

SPLITS = ("train", "eval", "teacher_fit")
_SPLIT_TAGS = {name: i for i, name in enumerate(SPLITS)}

IMAGE_PROTO_MAX_COSINE = 0.5
CAPTION_PROTO_MAX_COSINE = 0.3
_REJECTION_LIMIT = 1000

# Prototype texture knobs (fixed, not part of the config surface).  Blobs are
# kept small and the background near zero: for positive blob fields the mean
# pairwise cosine of two prototypes is about 4*pi*N*(sigma/side)**2, so wide
# blobs or a shared DC level would push every pair above the separation bound.
_BLOBS_PER_CLASS = 6
_BLOB_RADIUS_RANGE = (0.035, 0.07)  # fraction of image side
_BLOB_AMP_RANGE = (0.55, 0.95)
_RAMP_AMPLITUDE = 0.08
_BACKGROUND = 0.0


@dataclass(frozen=True)
class WorldConfig:
    num_classes: int = 16
    image_side: int = 32
    caption_dim: int = 24
    pixel_noise_sigma: float = 0.25
    caption_noise_sigma: float = 0.8
    seed: int = 7

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.image_side < 8:
            raise ValueError(f"image_side must be >= 8, got {self.image_side}")
        if self.caption_dim < 2:
            raise ValueError(f"caption_dim must be >= 2, got {self.caption_dim}")
        if self.pixel_noise_sigma < 0 or self.caption_noise_sigma < 0:
            raise ValueError("noise sigmas must be >= 0")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 bits")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        return cls(**d)


@dataclass(frozen=True)
class Sample:
    sample_id: int
    image: np.ndarray  # (image_side**2,) float32 in [0, 1]
    caption: np.ndarray  # (caption_dim,) float32, unit norm
    class_id: int  # hidden label, evaluation only


@dataclass(frozen=True)
class World:
    config: WorldConfig
    image_prototypes: np.ndarray  # (C, side**2) float64 in [0, 1]
    caption_prototypes: np.ndarray  # (C, caption_dim) float64, unit rows
    fingerprint: int = field(default=0)

    @property
    def num_classes(self) -> int:
        return self.config.num_classes


def _render_prototype(cfg: WorldConfig, class_index: int, attempt: int) -> np.ndarray:
    side = cfg.image_side
    coords = np.arange(side, dtype=np.float64)
    yy, xx = np.meshgrid(coords, coords, indexing="ij")

    key = (cfg.seed, rng.IMAGE_PROTO, class_index, attempt)
    theta = 2.0 * np.pi * float(rng.uniform01(*key, 0))
    ux = (xx / side) - 0.5
    uy = (yy / side) - 0.5
    img = _BACKGROUND + _RAMP_AMPLITUDE * (ux * np.cos(theta) + uy * np.sin(theta))

    lo, hi = _BLOB_RADIUS_RANGE
    for b in range(_BLOBS_PER_CLASS):
        cx = side * (0.12 + 0.76 * float(rng.uniform01(*key, 10 + 4 * b)))
        cy = side * (0.12 + 0.76 * float(rng.uniform01(*key, 11 + 4 * b)))
        radius = side * (lo + (hi - lo) * float(rng.uniform01(*key, 12 + 4 * b)))
        amp_lo, amp_hi = _BLOB_AMP_RANGE
        amp = amp_lo + (amp_hi - amp_lo) * float(rng.uniform01(*key, 13 + 4 * b))
        img = img + amp * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2.0 * radius**2))

    return np.clip(img, 0.0, 1.0).ravel()


def _pairwise_ok(candidate: np.ndarray, accepted: list[np.ndarray], max_cos: float) -> bool:
    c = candidate / np.linalg.norm(candidate)
    for other in accepted:
        o = other / np.linalg.norm(other)
        if float(c @ o) >= max_cos:
            return False
    return True


def build_world(cfg: WorldConfig) -> World:
    """Render prototype banks for the config; deterministic in the seed."""
    image_protos: list[np.ndarray] = []
    for c in range(cfg.num_classes):
        for attempt in range(_REJECTION_LIMIT):
            cand = _render_prototype(cfg, c, attempt)
            if _pairwise_ok(cand, image_protos, IMAGE_PROTO_MAX_COSINE):
                image_protos.append(cand)
                break
        else:
            raise ValueError(
                f"could not separate image prototype {c} below cosine "
                f"{IMAGE_PROTO_MAX_COSINE} after {_REJECTION_LIMIT} draws; "
                "increase image_side or reduce num_classes"
            )

    caption_protos: list[np.ndarray] = []
    for c in range(cfg.num_classes):
        for attempt in range(_REJECTION_LIMIT):
            raw = rng.gaussian(cfg.seed, rng.CAPTION_PROTO, c, attempt, np.arange(cfg.caption_dim))
            cand = raw / np.linalg.norm(raw)
            if _pairwise_ok(cand, caption_protos, CAPTION_PROTO_MAX_COSINE):
                caption_protos.append(cand)
                break
        else:
            raise ValueError(
                f"could not separate caption prototype {c} below cosine "
                f"{CAPTION_PROTO_MAX_COSINE} after {_REJECTION_LIMIT} draws; "
                "increase caption_dim or reduce num_classes"
            )

    img_bank = np.stack(image_protos)
    cap_bank = np.stack(caption_protos)
    digest = hashlib.blake2b(digest_size=8)
    digest.update(json.dumps(cfg.to_dict(), sort_keys=True).encode("utf-8"))
    digest.update(img_bank.tobytes())
    digest.update(cap_bank.tobytes())
    fp = int.from_bytes(digest.digest(), "little")
    return World(config=cfg, image_prototypes=img_bank, caption_prototypes=cap_bank, fingerprint=fp)


def split_tag(split: str) -> int:
    if split not in _SPLIT_TAGS:
        raise ValueError(f"unknown split {split!r}; expected one of {SPLITS}")
    return _SPLIT_TAGS[split]


def sample_id_for(split: str, index: int) -> int:
    return (split_tag(split) << 48) | int(index)


def sample_arrays(world: World, split: str, start: int, count: int):
    """Vectorized generation of samples [start, start+count) of a split.

    Returns (images f32 (count, side**2), captions f32 (count, caption_dim),
    class_ids).  Sample ids are positional: sample_id_for(split, start + i).
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if start < 0:
        raise ValueError(f"start must be >= 0, got {start}")
    cfg = world.config
    tag = split_tag(split)
    idx = np.arange(start, start + count, dtype=np.uint64)

    cls = np.minimum(
        (rng.uniform01(cfg.seed, rng.CLASS_PICK, tag, idx) * cfg.num_classes).astype(np.int64),
        cfg.num_classes - 1,
    )

    n_px = cfg.image_side**2
    images = world.image_prototypes[cls]
    if cfg.pixel_noise_sigma > 0:
        noise = rng.gaussian(
            cfg.seed, rng.PIXEL_NOISE, tag, idx[:, None], np.arange(n_px, dtype=np.uint64)[None, :]
        )
        images = images + cfg.pixel_noise_sigma * noise
    images = np.clip(images, 0.0, 1.0).astype(np.float32)

    captions = world.caption_prototypes[cls]
    if cfg.caption_noise_sigma > 0:
        cnoise = rng.gaussian(
            cfg.seed,
            rng.CAPTION_NOISE,
            tag,
            idx[:, None],
            np.arange(cfg.caption_dim, dtype=np.uint64)[None, :],
        )
        captions = captions + cfg.caption_noise_sigma * cnoise
    captions = l2_normalize_rows(captions).astype(np.float32)

    return images, captions, cls


def draw_samples(world: World, split: str, n: int) -> list[Sample]:
    """Samples 0..n-1 of a split as Sample records."""
    images, captions, cls = sample_arrays(world, split, 0, n)
    return [
        Sample(
            sample_id=sample_id_for(split, i),
            image=images[i],
            caption=captions[i],
            class_id=int(cls[i]),
        )
        for i in range(n)
    ]


def zero_shot_prompts(world: World) -> np.ndarray:
    """The C noiseless caption prototypes, used as classification prompts."""
    return world.caption_prototypes.copy()


def nearest_image_class(world: World, image) -> int:
    """Index of the image prototype with the highest cosine to the image."""
    v = np.asarray(image, dtype=np.float64).ravel()
    protos = l2_normalize_rows(world.image_prototypes)
    return int(np.argmax(protos @ (v / np.linalg.norm(v))))


def nearest_caption_class(world: World, caption) -> int:
    v = np.asarray(caption, dtype=np.float64).ravel()
    protos = world.caption_prototypes
    return int(np.argmax(protos @ (v / np.linalg.norm(v))))
