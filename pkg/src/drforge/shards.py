"""Reinforced shard files: fixed-size binary records carrying raw samples,
stored augmentation parameters, and BF16 teacher embeddings.

Record layout (little-endian, in order):
  sample_id u64
  image payload             image_side^2 f32
  ground-truth caption      caption_dim f32
  N synthetic captions      caption_dim f32 each
  A augmentation params     21-byte wire records
  per teacher k:            A image embeddings then 1+N text embeddings,
                            d_k bf16 (u16) values each

bytes per record = 8 + 4*S^2 + 4*caption_dim*(1+N) + 21*A
                   + sum_k 2*d_k*(A+1+N)

Embeddings are quantized to BF16 on write and decoded to f32 on read;
quantization is idempotent, so rewriting a decoded record reproduces the
same bytes.  The file envelope (magic, version, JSON meta, CRC32 trailer)
comes from the container module.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import container
from .augment import PARAMS_WIRE_SIZE, AugmentationParams, pack_params, unpack_params
from .kernels import bf16_decode, bf16_encode

SHARD_MAGIC = b"DRSH"
SHARD_EXTENSION = ".drsh"


@dataclass(frozen=True)
class TeacherInfo:
    teacher_id: str
    d_k: int
    logit_scale: float

    def to_meta(self) -> dict:
        return {"teacher_id": self.teacher_id, "d_k": self.d_k, "logit_scale": self.logit_scale}

    @classmethod
    def from_meta(cls, meta: dict) -> "TeacherInfo":
        return cls(str(meta["teacher_id"]), int(meta["d_k"]), float(meta["logit_scale"]))


@dataclass(frozen=True)
class ShardHeader:
    shard_id: int
    record_count: int
    image_side: int
    caption_dim: int
    num_augmentations: int  # A
    num_synthetic_captions: int  # N
    teachers: tuple = field(default_factory=tuple)
    world_fingerprint: int = 0

    def __post_init__(self):
        if len(self.teachers) == 0:
            raise ValueError("shard header needs at least one teacher")
        if self.num_augmentations < 1:
            raise ValueError(f"A must be >= 1, got {self.num_augmentations}")
        if self.num_synthetic_captions < 0:
            raise ValueError(f"N must be >= 0, got {self.num_synthetic_captions}")
        if self.record_count < 0:
            raise ValueError(f"record_count must be >= 0, got {self.record_count}")
        object.__setattr__(self, "teachers", tuple(self.teachers))

    def to_meta(self) -> dict:
        return {
            "shard_id": self.shard_id,
            "record_count": self.record_count,
            "image_side": self.image_side,
            "caption_dim": self.caption_dim,
            "A": self.num_augmentations,
            "N": self.num_synthetic_captions,
            "teachers": [t.to_meta() for t in self.teachers],
            "world_fingerprint": self.world_fingerprint,
        }

    @classmethod
    def from_meta(cls, meta: dict) -> "ShardHeader":
        return cls(
            shard_id=int(meta["shard_id"]),
            record_count=int(meta["record_count"]),
            image_side=int(meta["image_side"]),
            caption_dim=int(meta["caption_dim"]),
            num_augmentations=int(meta["A"]),
            num_synthetic_captions=int(meta["N"]),
            teachers=tuple(TeacherInfo.from_meta(t) for t in meta["teachers"]),
            world_fingerprint=int(meta["world_fingerprint"]),
        )

    def record_size(self) -> int:
        return record_size(
            self.image_side,
            self.caption_dim,
            self.num_augmentations,
            self.num_synthetic_captions,
            [t.d_k for t in self.teachers],
        )


def record_size(image_side: int, caption_dim: int, a: int, n: int, teacher_dims: Sequence[int]) -> int:
    """Closed-form bytes per record; see module docstring."""
    return (
        8
        + 4 * image_side * image_side
        + 4 * caption_dim * (1 + n)
        + PARAMS_WIRE_SIZE * a
        + sum(2 * d * (a + 1 + n) for d in teacher_dims)
    )


@dataclass
class ReinforcedRecord:
    sample_id: int
    image: np.ndarray  # (S^2,) f32
    gt_caption: np.ndarray  # (caption_dim,) f32
    syn_captions: np.ndarray  # (N, caption_dim) f32
    aug_params: tuple  # A AugmentationParams
    teacher_image_embs: list  # per teacher: (A, d_k) float
    teacher_text_embs: list  # per teacher: (1+N, d_k) float, row 0 = GT caption


def _check_record(rec: ReinforcedRecord, header: ShardHeader, index: int) -> None:
    s2 = header.image_side * header.image_side
    a = header.num_augmentations
    n = header.num_synthetic_captions

    def fail(msg: str):
        raise ValueError(f"record {index}: {msg}")

    if np.asarray(rec.image).size != s2:
        fail(f"image has {np.asarray(rec.image).size} pixels, expected {s2}")
    if np.asarray(rec.gt_caption).size != header.caption_dim:
        fail(f"gt caption dim {np.asarray(rec.gt_caption).size}, expected {header.caption_dim}")
    syn = np.asarray(rec.syn_captions)
    if syn.size == 0:
        syn = syn.reshape(0, header.caption_dim)
    if syn.shape != (n, header.caption_dim):
        fail(f"synthetic captions shape {syn.shape}, expected {(n, header.caption_dim)}")
    if len(rec.aug_params) != a:
        fail(f"{len(rec.aug_params)} augmentation params, expected {a}")
    for p in rec.aug_params:
        if not isinstance(p, AugmentationParams):
            fail("augmentation params must be AugmentationParams instances")
        p.validate(header.image_side)
    if len(rec.teacher_image_embs) != len(header.teachers) or len(rec.teacher_text_embs) != len(
        header.teachers
    ):
        fail(
            f"embeddings for {len(rec.teacher_image_embs)} teachers, "
            f"expected {len(header.teachers)}"
        )
    for k, info in enumerate(header.teachers):
        img = np.asarray(rec.teacher_image_embs[k])
        txt = np.asarray(rec.teacher_text_embs[k])
        if img.shape != (a, info.d_k):
            fail(f"teacher {k} image embeddings shape {img.shape}, expected {(a, info.d_k)}")
        if txt.shape != (1 + n, info.d_k):
            fail(f"teacher {k} text embeddings shape {txt.shape}, expected {(1 + n, info.d_k)}")


def _quantize_rows(values: np.ndarray, what: str, index: int) -> np.ndarray:
    codes = bf16_encode(np.asarray(values, dtype=np.float64))
    norms = np.linalg.norm(bf16_decode(codes), axis=-1)
    bad = np.abs(norms - 1.0) > 2.0**-7
    if np.any(bad):
        row = int(np.argmax(bad))
        raise ValueError(
            f"record {index}: {what} row {row} norm {norms.flat[row]:.6f} "
            "not within 2^-7 of 1 after quantization"
        )
    return codes


def _encode_record(rec: ReinforcedRecord, header: ShardHeader, index: int) -> bytes:
    _check_record(rec, header, index)
    parts = [struct.pack("<Q", int(rec.sample_id) & 0xFFFFFFFFFFFFFFFF)]
    parts.append(np.ascontiguousarray(rec.image, dtype="<f4").tobytes())
    parts.append(np.ascontiguousarray(rec.gt_caption, dtype="<f4").tobytes())
    parts.append(np.ascontiguousarray(rec.syn_captions, dtype="<f4").tobytes())
    for p in rec.aug_params:
        parts.append(pack_params(p))
    for k in range(len(header.teachers)):
        img_codes = _quantize_rows(rec.teacher_image_embs[k], f"teacher {k} image embedding", index)
        txt_codes = _quantize_rows(rec.teacher_text_embs[k], f"teacher {k} text embedding", index)
        parts.append(np.ascontiguousarray(img_codes, dtype="<u2").tobytes())
        parts.append(np.ascontiguousarray(txt_codes, dtype="<u2").tobytes())
    return b"".join(parts)


def _decode_record(buf: bytes, header: ShardHeader) -> ReinforcedRecord:
    s2 = header.image_side * header.image_side
    a = header.num_augmentations
    n = header.num_synthetic_captions
    off = 0
    (sample_id,) = struct.unpack_from("<Q", buf, off)
    off += 8
    image = np.frombuffer(buf, dtype="<f4", count=s2, offset=off).copy()
    off += 4 * s2
    gt = np.frombuffer(buf, dtype="<f4", count=header.caption_dim, offset=off).copy()
    off += 4 * header.caption_dim
    syn = (
        np.frombuffer(buf, dtype="<f4", count=n * header.caption_dim, offset=off)
        .reshape(n, header.caption_dim)
        .copy()
    )
    off += 4 * n * header.caption_dim
    params = []
    for _ in range(a):
        params.append(unpack_params(buf[off : off + PARAMS_WIRE_SIZE]))
        off += PARAMS_WIRE_SIZE
    img_embs, txt_embs = [], []
    for info in header.teachers:
        codes = np.frombuffer(buf, dtype="<u2", count=a * info.d_k, offset=off).reshape(a, info.d_k)
        img_embs.append(bf16_decode(codes.astype(np.uint16)))
        off += 2 * a * info.d_k
        codes = np.frombuffer(buf, dtype="<u2", count=(1 + n) * info.d_k, offset=off).reshape(
            1 + n, info.d_k
        )
        txt_embs.append(bf16_decode(codes.astype(np.uint16)))
        off += 2 * (1 + n) * info.d_k
    return ReinforcedRecord(
        sample_id=int(sample_id),
        image=image,
        gt_caption=gt,
        syn_captions=syn,
        aug_params=tuple(params),
        teacher_image_embs=img_embs,
        teacher_text_embs=txt_embs,
    )


def write_shard(path: str, header: ShardHeader, records: Iterable[ReinforcedRecord]) -> str:
    """Write a shard atomically; returns its 64-bit content hash (hex)."""
    records = list(records)
    if header.record_count != len(records):
        header = ShardHeader(
            shard_id=header.shard_id,
            record_count=len(records),
            image_side=header.image_side,
            caption_dim=header.caption_dim,
            num_augmentations=header.num_augmentations,
            num_synthetic_captions=header.num_synthetic_captions,
            teachers=header.teachers,
            world_fingerprint=header.world_fingerprint,
        )
    payload = b"".join(_encode_record(rec, header, i) for i, rec in enumerate(records))
    try:
        return container.write_container(path, SHARD_MAGIC, header.to_meta(), payload)
    except OSError as exc:
        raise OSError(f"failed writing shard {path}: {exc}") from exc


def _expected_payload(meta: dict) -> int:
    header = ShardHeader.from_meta(meta)
    return header.record_count * header.record_size()


def read_shard(path: str) -> tuple[ShardHeader, Iterator[ReinforcedRecord]]:
    """Validate the whole file (magics, version, CRC) up front, then yield
    records in stored order.  Concurrent readers each get their own state."""
    meta, payload = container.read_container(path, SHARD_MAGIC, "shard", _expected_payload)
    header = ShardHeader.from_meta(meta)
    rs = header.record_size()

    def records() -> Iterator[ReinforcedRecord]:
        for i in range(header.record_count):
            yield _decode_record(payload[i * rs : (i + 1) * rs], header)

    return header, records()


def read_all(path: str) -> tuple[ShardHeader, list]:
    header, it = read_shard(path)
    return header, list(it)


def inspect(path: str) -> str:
    """Header-level summary; decodes no embeddings."""
    meta, payload = container.read_container(path, SHARD_MAGIC, "shard", _expected_payload)
    header = ShardHeader.from_meta(meta)
    size = os.path.getsize(path)
    lines = [
        f"shard {header.shard_id}: {path}",
        f"  records: {header.record_count}",
        f"  image_side: {header.image_side}  caption_dim: {header.caption_dim}",
        f"  A={header.num_augmentations} N={header.num_synthetic_captions} K={len(header.teachers)}",
    ]
    for t in header.teachers:
        lines.append(f"  teacher {t.teacher_id}: d_k={t.d_k} logit_scale={t.logit_scale}")
    lines.append(f"  world_fingerprint: {header.world_fingerprint}")
    lines.append(f"  file size: {size} bytes  bytes/record: {header.record_size()}")
    return "\n".join(lines)
