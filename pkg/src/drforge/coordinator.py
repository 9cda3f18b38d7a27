"""Resumable parallel generation of reinforced shards.

Every shard is a pure function of the job config and its shard index, so
output bytes are independent of worker count, claim order, and crash/resume
history.  Workers claim pending shards through the manifest (serialized by
an in-process lock) plus an on-disk lease file with an expiry, which also
guards against a second process working the same directory.  A worker that
dies leaves an expired lease; the shard is reclaimed and regenerated.
"""

from __future__ import annotations

import datetime
import json
import os
import random
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import container, rng
from .augment import apply, draw_params
from .encoders import CaptionerModel, TeacherModel
from .manifest import MANIFEST_NAME, Manifest, ShardEntry, config_conflicts
from .shards import ReinforcedRecord, ShardHeader, TeacherInfo, write_shard
from .world import World, WorldConfig, build_world, sample_arrays, sample_id_for

DEFAULT_LEASE_TTL = 60.0
LEASE_DIR = "leases"


@dataclass(frozen=True)
class TeacherSpec:
    teacher_id: str
    d_k: int = 16
    ridge_lambda: float = 1e-3
    logit_scale: float = 70.0
    n_fit_samples: int = 2048

    def to_dict(self) -> dict:
        return {
            "teacher_id": self.teacher_id,
            "d_k": self.d_k,
            "ridge_lambda": self.ridge_lambda,
            "logit_scale": self.logit_scale,
            "n_fit_samples": self.n_fit_samples,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TeacherSpec":
        return cls(**d)


@dataclass(frozen=True)
class CaptionerSpec:
    captioner_id: str = "captioner"
    backbone_teacher_id: Optional[str] = None  # default: first roster teacher
    caption_noise_sigma: float = 0.05
    seed: int = 1

    def to_dict(self) -> dict:
        return {
            "captioner_id": self.captioner_id,
            "backbone_teacher_id": self.backbone_teacher_id,
            "caption_noise_sigma": self.caption_noise_sigma,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CaptionerSpec":
        return cls(**d)


@dataclass(frozen=True)
class GenerationJob:
    world: WorldConfig
    teachers: tuple
    captioner: CaptionerSpec
    num_augmentations: int = 2
    num_synthetic_captions: int = 5
    samples_per_shard: int = 256
    num_shards: int = 8
    output_dir: str = "."
    parallelism: int = 1

    def __post_init__(self):
        object.__setattr__(self, "teachers", tuple(self.teachers))
        if len(self.teachers) == 0:
            raise ValueError("job needs at least one teacher")
        if self.num_augmentations < 1:
            raise ValueError(f"A must be >= 1, got {self.num_augmentations}")
        if self.num_synthetic_captions < 0:
            raise ValueError(f"N must be >= 0, got {self.num_synthetic_captions}")
        if self.samples_per_shard < 1:
            raise ValueError(f"samples_per_shard must be >= 1, got {self.samples_per_shard}")
        if self.num_shards < 0:
            raise ValueError(f"num_shards must be >= 0, got {self.num_shards}")
        if self.parallelism < 1:
            raise ValueError(f"parallelism must be >= 1, got {self.parallelism}")
        ids = [t.teacher_id for t in self.teachers]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate teacher ids in roster: {ids}")

    def to_dict(self) -> dict:
        return {
            "world": self.world.to_dict(),
            "teachers": [t.to_dict() for t in self.teachers],
            "captioner": self.captioner.to_dict(),
            "num_augmentations": self.num_augmentations,
            "num_synthetic_captions": self.num_synthetic_captions,
            "samples_per_shard": self.samples_per_shard,
            "num_shards": self.num_shards,
            "output_dir": self.output_dir,
            "parallelism": self.parallelism,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GenerationJob":
        d = dict(d)
        d["world"] = WorldConfig.from_dict(d["world"])
        d["teachers"] = tuple(TeacherSpec.from_dict(t) for t in d["teachers"])
        d["captioner"] = CaptionerSpec.from_dict(d.get("captioner", {}))
        return cls(**d)

    @classmethod
    def from_json_file(cls, path: str) -> "GenerationJob":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def config_snapshot(self) -> dict:
        """Identity of the dataset: everything that affects shard bytes.

        output_dir and parallelism are deliberately excluded; neither may
        change the generated content.
        """
        return {
            "world": self.world.to_dict(),
            "teachers": [t.to_dict() for t in self.teachers],
            "captioner": self.captioner.to_dict(),
            "A": self.num_augmentations,
            "N": self.num_synthetic_captions,
            "samples_per_shard": self.samples_per_shard,
            "num_shards": self.num_shards,
        }

    def shard_path(self, index: int) -> str:
        return os.path.join(self.output_dir, shard_filename(index))

    def manifest_path(self) -> str:
        return os.path.join(self.output_dir, MANIFEST_NAME)


def shard_filename(index: int) -> str:
    return f"shard-{index:05d}.drsh"


def prepare(job: GenerationJob):
    """Build the world and fit all frozen models for a job."""
    world = build_world(job.world)
    teachers = []
    for spec in job.teachers:
        model = TeacherModel(
            spec.teacher_id,
            d_k=spec.d_k,
            ridge_lambda=spec.ridge_lambda,
            logit_scale=spec.logit_scale,
        ).fit(world, n_samples=spec.n_fit_samples)
        teachers.append(model)
    backbone_id = job.captioner.backbone_teacher_id or job.teachers[0].teacher_id
    by_id = {t.teacher_id: t for t in teachers}
    if backbone_id not in by_id:
        raise ValueError(f"captioner backbone {backbone_id!r} is not in the teacher roster")
    captioner = CaptionerModel(
        job.captioner.captioner_id,
        by_id[backbone_id],
        world,
        caption_noise_sigma=job.captioner.caption_noise_sigma,
        seed=job.captioner.seed,
    )
    return world, teachers, captioner


def plan(job: GenerationJob) -> Manifest:
    """Create (or re-validate) the manifest; idempotent over a compatible one."""
    os.makedirs(job.output_dir, exist_ok=True)
    snapshot = job.config_snapshot()
    path = job.manifest_path()
    if os.path.exists(path):
        existing = Manifest.load(path)
        diffs = config_conflicts(existing.config, snapshot)
        if diffs:
            raise ValueError("manifest conflict on fields: " + ", ".join(diffs))
        return existing
    dataset_id = f"{job.world.seed}-{job.num_augmentations}a{job.num_synthetic_captions}n-{len(job.teachers)}t"
    entries = [
        ShardEntry(path=shard_filename(i), record_count=job.samples_per_shard)
        for i in range(job.num_shards)
    ]
    manifest = Manifest(dataset_id=dataset_id, config=snapshot, entries=entries)
    manifest.save(path)
    return manifest


def augmentation_seed(world_seed: int, sample_id: int, aug_index: int) -> int:
    return int(rng.hash64(world_seed, rng.AUG_SEED, sample_id, aug_index))


def generate_shard(world: World, teachers, captioner: CaptionerModel, job: GenerationJob, index: int):
    """Deterministically build one shard's header and records."""
    count = job.samples_per_shard
    start = index * count
    a_count = job.num_augmentations
    n_syn = job.num_synthetic_captions
    side = world.config.image_side

    images, captions, _classes = sample_arrays(world, "train", start, count)
    records = []
    views = np.empty((count * a_count, side * side), dtype=np.float64)
    all_params = []
    for i in range(count):
        sample_id = sample_id_for("train", start + i)
        params = []
        for a_idx in range(a_count):
            p = draw_params(augmentation_seed(world.config.seed, sample_id, a_idx), side)
            params.append(p)
            views[i * a_count + a_idx] = apply(images[i], p).pixels
        all_params.append(tuple(params))

    syn = captioner.generate_batch(images, n_syn)  # (count, N, caption_dim)

    teacher_img = []  # per teacher: (count * A, d_k)
    teacher_txt = []  # per teacher: (count, 1 + N, d_k)
    for model in teachers:
        teacher_img.append(model.encode_images(views))
        texts = np.concatenate([captions[:, None, :], syn], axis=1)
        flat = texts.reshape(count * (1 + n_syn), -1)
        teacher_txt.append(model.encode_texts(flat).reshape(count, 1 + n_syn, -1))

    for i in range(count):
        records.append(
            ReinforcedRecord(
                sample_id=sample_id_for("train", start + i),
                image=images[i],
                gt_caption=captions[i],
                syn_captions=syn[i],
                aug_params=all_params[i],
                teacher_image_embs=[
                    teacher_img[k][i * a_count : (i + 1) * a_count] for k in range(len(teachers))
                ],
                teacher_text_embs=[teacher_txt[k][i] for k in range(len(teachers))],
            )
        )

    header = ShardHeader(
        shard_id=index,
        record_count=count,
        image_side=side,
        caption_dim=world.config.caption_dim,
        num_augmentations=a_count,
        num_synthetic_captions=n_syn,
        teachers=tuple(
            TeacherInfo(t.teacher_id, t.d_k, t.logit_scale) for t in teachers
        ),
        world_fingerprint=world.fingerprint,
    )
    return header, records


@dataclass
class GenerationReport:
    generated: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    hashes: dict = field(default_factory=dict)
    elapsed_seconds: float = 0.0
    workers: int = 0


@dataclass
class VerifyReport:
    checked: int = 0
    mismatched: list = field(default_factory=list)
    missing: list = field(default_factory=list)

    @property
    def clean(self) -> bool:
        return not self.mismatched and not self.missing


class _LeaseBox:
    """On-disk lease with expiry; one file per shard under leases/."""

    def __init__(self, directory: str, ttl: float):
        self.directory = os.path.join(directory, LEASE_DIR)
        self.ttl = ttl
        os.makedirs(self.directory, exist_ok=True)

    def _path(self, index: int) -> str:
        return os.path.join(self.directory, f"shard-{index:05d}.lease")

    def acquire(self, index: int, worker_id: str, now: Optional[float] = None) -> bool:
        now = time.time() if now is None else now
        payload = json.dumps({"worker_id": worker_id, "expires_at": now + self.ttl}).encode()
        path = self._path(index)
        try:
            fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_EXCL)
        except FileExistsError:
            try:
                with open(path, "r", encoding="utf-8") as fh:
                    lease = json.load(fh)
                expired = float(lease.get("expires_at", 0.0)) < now
                mine = lease.get("worker_id") == worker_id
            except (OSError, json.JSONDecodeError, ValueError):
                expired, mine = True, False
            if not (expired or mine):
                return False
            tmp = path + f".steal.{worker_id}"
            with open(tmp, "wb") as fh:
                fh.write(payload)
            os.replace(tmp, path)
            return True
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        return True

    def release(self, index: int) -> None:
        try:
            os.unlink(self._path(index))
        except FileNotFoundError:
            pass


def _check_fingerprints(world: World, teachers) -> None:
    for t in teachers:
        if t.world_fingerprint_ != world.fingerprint:
            raise ValueError(
                f"teacher {t.teacher_id} was fitted on world {t.world_fingerprint_}, "
                f"job world is {world.fingerprint}"
            )


def verify(job: GenerationJob, manifest: Optional[Manifest] = None) -> VerifyReport:
    """Re-hash every done shard; downgrade mismatches and missing files."""
    path = job.manifest_path()
    manifest = manifest or Manifest.load(path)
    report = VerifyReport()
    for i, entry in enumerate(manifest.entries):
        if entry.status != "done":
            continue
        report.checked += 1
        shard_file = os.path.join(job.output_dir, entry.path)
        if not os.path.exists(shard_file):
            manifest.downgrade(i, "missing file")
            report.missing.append(i)
            continue
        actual = container.file_hash(shard_file)
        if actual != entry.content_hash:
            manifest.downgrade(i, f"hash mismatch (found {actual})")
            report.mismatched.append(i)
    if not report.clean:
        manifest.save(path)
    return report


def run(
    job: GenerationJob,
    progress: Optional[Callable[[int, int, str], None]] = None,
    lease_ttl: float = DEFAULT_LEASE_TTL,
    prepared=None,
) -> GenerationReport:
    """Generate every pending shard; resumable and parallelism-independent.

    progress(index, total, hash) is called after each shard completes; an
    exception from it cancels remaining work after in-flight shards finish
    (the crash-injection hook for resume testing).
    """
    start_time = time.monotonic()
    manifest = plan(job)
    report = GenerationReport(workers=job.parallelism)
    if job.num_shards == 0:
        return report

    world, teachers, captioner = prepared if prepared is not None else prepare(job)
    _check_fingerprints(world, teachers)
    if manifest.config["world"] != job.world.to_dict():
        raise ValueError("manifest world config does not match job world")

    manifest_path = job.manifest_path()
    lock = threading.Lock()
    leases = _LeaseBox(job.output_dir, lease_ttl)
    cancel = threading.Event()
    errors: list = []

    verify(job, manifest)
    with lock:
        for i, entry in enumerate(manifest.entries):
            if entry.status == "done":
                report.skipped.append(i)
                report.hashes[i] = entry.content_hash
            elif entry.status == "in_progress":
                # No live workers yet in this run: a leftover claim is stale.
                manifest.release(i, "stale claim at startup")
        manifest.save(manifest_path)

    total = len(manifest.entries)

    def worker(slot: int) -> None:
        worker_id = f"w{slot}-pid{os.getpid()}"
        order_rng = random.Random(int(rng.hash64(rng.str_seed(worker_id), rng.WORKER_PICK)))
        while not cancel.is_set():
            with lock:
                candidates = manifest.pending_indices()
            if not candidates:
                return
            order_rng.shuffle(candidates)
            claimed = None
            for idx in candidates:
                with lock:
                    if manifest.entries[idx].status != "pending":
                        continue
                    if not leases.acquire(idx, worker_id):
                        continue
                    manifest.claim(idx, worker_id)
                    manifest.save(manifest_path)
                    claimed = idx
                    break
            if claimed is None:
                if not any(e.status == "pending" for e in manifest.entries):
                    return
                time.sleep(0.01)
                continue
            try:
                header, records = generate_shard(world, teachers, captioner, job, claimed)
                shard_file = job.shard_path(claimed)
                written_hash = write_shard(shard_file, header, records)
                reread = container.file_hash(shard_file)
                if reread != written_hash:
                    raise ValueError(
                        f"shard {claimed} readback hash {reread} != written {written_hash}"
                    )
                stamp = datetime.datetime.now(datetime.timezone.utc).isoformat()
                with lock:
                    manifest.complete(claimed, written_hash, stamp)
                    manifest.save(manifest_path)
                    report.generated.append(claimed)
                    report.hashes[claimed] = written_hash
                leases.release(claimed)
                if progress is not None:
                    progress(claimed, total, written_hash)
            except BaseException as exc:
                with lock:
                    if manifest.entries[claimed].status == "in_progress":
                        manifest.release(claimed, f"worker error: {exc}")
                        manifest.save(manifest_path)
                leases.release(claimed)
                errors.append(exc)
                cancel.set()
                return

    threads = [threading.Thread(target=worker, args=(slot,)) for slot in range(job.parallelism)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()

    report.elapsed_seconds = time.monotonic() - start_time
    if errors:
        raise errors[0]
    if not manifest.all_done():
        raise RuntimeError(
            f"generation incomplete: {len(manifest.pending_indices())} shards still pending"
        )
    return report
