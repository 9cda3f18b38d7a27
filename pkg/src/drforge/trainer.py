"""Training harness: SGD on the linear student with the lambda-mixed loss,
fed either by reinforced shards (stored augmentations, teacher embeddings,
synthetic captions) or by a plain on-the-fly pipeline.

Determinism contract: training is a pure function of TrainConfig.  Data
order is a seeded shard-order shuffle per epoch with sequential records
inside each shard; augmentation choice per epoch is derived from counters,
never from mutable RNG state.  The whole dataset is held in memory, so
there is no prefetch machinery to violate the contract.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import rng
from .augment import apply, draw_params, replay
from .encoders import StudentModel, avgpool
from .kernels import l2_normalize_rows, l2_normalize_rows_vjp
from .losses import (
    STUDENT_SCALE_RANGE,
    BatchEmbeddings,
    LossConfig,
    LossReport,
    caption_term_expansion,
    loss_csv_header,
    loss_csv_row,
    total_loss,
)
from .manifest import Manifest
from .shards import read_all
from .world import World, WorldConfig, build_world, sample_arrays, sample_id_for, zero_shot_prompts

LR_SCHEDULES = ("cosine", "constant")
AUG_SELECTIONS = ("cycle", "sample")


@dataclass(frozen=True)
class TrainConfig:
    loss: LossConfig = field(default_factory=LossConfig)
    batch_size: int = 64
    steps: int = 2000
    learning_rate: float = 0.5
    lr_schedule: str = "cosine"
    warmup_steps: int = 100
    momentum: float = 0.0
    seed: int = 0
    data_manifest: Optional[str] = None
    unreinforced: bool = False
    world: Optional[WorldConfig] = None
    train_samples: int = 4096
    active_syn_captions: int = 0
    use_stored_teacher_scales: bool = True
    teacher_subset: Optional[tuple] = None
    aug_selection: str = "cycle"
    ema_decay: Optional[float] = None
    student_embed_dim: int = 16
    eval_samples: int = 512
    retrieval_samples: int = 256

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {LR_SCHEDULES}, got {self.lr_schedule!r}")
        if self.warmup_steps < 0:
            raise ValueError(f"warmup_steps must be >= 0, got {self.warmup_steps}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.aug_selection not in AUG_SELECTIONS:
            raise ValueError(
                f"aug_selection must be one of {AUG_SELECTIONS}, got {self.aug_selection!r}"
            )
        if self.active_syn_captions < 0:
            raise ValueError(f"active_syn_captions must be >= 0, got {self.active_syn_captions}")
        if self.ema_decay is not None and not 0.0 < self.ema_decay < 1.0:
            raise ValueError(f"ema_decay must be in (0, 1), got {self.ema_decay}")
        if self.unreinforced:
            if self.world is None:
                raise ValueError("unreinforced training needs an explicit world config")
            if self.loss.distill_weight > 0:
                raise ValueError("reinforcements required for distillation (distill_weight > 0)")
            if self.active_syn_captions > 0:
                raise ValueError("reinforcements required for synthetic captions")
            if self.train_samples < self.batch_size:
                raise ValueError("train_samples must be >= batch_size")
        elif self.data_manifest is None:
            raise ValueError("either data_manifest or unreinforced=True is required")
        if self.teacher_subset is not None:
            object.__setattr__(self, "teacher_subset", tuple(self.teacher_subset))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["loss"] = self.loss.to_dict()
        d["world"] = self.world.to_dict() if self.world is not None else None
        d["teacher_subset"] = list(self.teacher_subset) if self.teacher_subset else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "loss" in d and d["loss"] is not None:
            d["loss"] = LossConfig.from_dict(d["loss"])
        if d.get("world") is not None:
            d["world"] = WorldConfig.from_dict(d["world"])
        if d.get("teacher_subset") is not None:
            d["teacher_subset"] = tuple(d["teacher_subset"])
        return cls(**d)

    @classmethod
    def from_json_file(cls, path: str) -> "TrainConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class EvalReport:
    zeroshot_acc: float
    retrieval_i2t_at1: float
    retrieval_t2i_at1: float
    steps_seen: int = 0
    samples_seen: int = 0
    wall_clock_per_step: float = 0.0

    def __post_init__(self):
        for name in ("zeroshot_acc", "retrieval_i2t_at1", "retrieval_t2i_at1"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class CheckpointEval:
    step: int
    samples_seen: int
    report: EvalReport


@dataclass
class TrainResult:
    student: StudentModel
    student_scale: float
    eval_report: EvalReport
    csv_text: str
    checkpoints: list
    step_seconds: list
    final_loss: float
    first_loss: float


class _ShardedData:
    """All reinforced records in memory, grouped by shard for ordering."""

    def __init__(self, manifest_path: str):
        manifest = Manifest.load(manifest_path)
        base = os.path.dirname(os.path.abspath(manifest_path))
        not_done = [i for i, e in enumerate(manifest.entries) if e.status != "done"]
        if not_done:
            raise ValueError(f"manifest has unfinished shards {not_done}; run generation first")
        if not manifest.entries:
            raise ValueError("manifest lists no shards")

        self.world_config = WorldConfig.from_dict(manifest.config["world"])
        images, gts, syns, params, ids = [], [], [], [], []
        t_img_parts, t_txt_parts = None, None
        self.shard_sizes = []
        header0 = None
        for entry in manifest.entries:
            header, records = read_all(os.path.join(base, entry.path))
            if header0 is None:
                header0 = header
                t_img_parts = [[] for _ in header.teachers]
                t_txt_parts = [[] for _ in header.teachers]
            elif header.world_fingerprint != header0.world_fingerprint:
                raise ValueError(
                    f"shard {entry.path} world fingerprint {header.world_fingerprint} "
                    f"disagrees with {header0.world_fingerprint}"
                )
            self.shard_sizes.append(len(records))
            for rec in records:
                images.append(rec.image)
                gts.append(rec.gt_caption)
                syns.append(rec.syn_captions)
                params.append(rec.aug_params)
                ids.append(rec.sample_id)
                for k in range(len(header.teachers)):
                    t_img_parts[k].append(rec.teacher_image_embs[k])
                    t_txt_parts[k].append(rec.teacher_text_embs[k])

        assert header0 is not None
        self.header = header0
        self.sample_ids = np.asarray(ids, dtype=np.uint64)
        self.images = np.asarray(images, dtype=np.float64)
        self.gt_captions = np.asarray(gts, dtype=np.float64)
        self.syn_captions = np.asarray(syns, dtype=np.float64)
        self.aug_params = params
        # BF16 decode leaves rows slightly off unit norm; renormalize once so
        # the loss layer's unit-row validation holds exactly.
        self.teacher_img = [
            l2_normalize_rows(np.asarray(p, dtype=np.float64).reshape(-1, p[0].shape[-1])).reshape(
                len(p), -1, p[0].shape[-1]
            )
            for p in t_img_parts
        ]
        self.teacher_txt = [
            l2_normalize_rows(np.asarray(p, dtype=np.float64).reshape(-1, p[0].shape[-1])).reshape(
                len(p), -1, p[0].shape[-1]
            )
            for p in t_txt_parts
        ]
        self.num_samples = self.images.shape[0]

    def teacher_indices(self, subset: Optional[Sequence[str]]) -> list:
        ids = [t.teacher_id for t in self.header.teachers]
        if subset is None:
            return list(range(len(ids)))
        missing = [s for s in subset if s not in ids]
        if missing:
            raise ValueError(f"teachers {missing} not present in shards (have {ids})")
        return [ids.index(s) for s in subset]


def _epoch_order_sharded(seed: int, epoch: int, shard_sizes: Sequence[int]) -> np.ndarray:
    keys = rng.hash64(seed, rng.SHARD_ORDER, epoch, np.arange(len(shard_sizes), dtype=np.uint64))
    starts = np.concatenate([[0], np.cumsum(shard_sizes)])[:-1]
    order = []
    for s in np.argsort(keys, kind="stable"):
        order.append(np.arange(starts[s], starts[s] + shard_sizes[s], dtype=np.int64))
    return np.concatenate(order)


def _epoch_order_flat(seed: int, epoch: int, n: int) -> np.ndarray:
    keys = rng.hash64(seed, rng.SHARD_ORDER, epoch, np.arange(n, dtype=np.uint64))
    return np.argsort(keys, kind="stable").astype(np.int64)


class _BatchStream:
    """Yields (indices, epoch) batches; drops partial batches at epoch ends."""

    def __init__(self, seed: int, n: int, batch_size: int, shard_sizes: Optional[Sequence[int]]):
        if n < batch_size:
            raise ValueError(f"dataset has {n} samples, smaller than batch_size {batch_size}")
        self.seed = seed
        self.n = n
        self.b = batch_size
        self.shard_sizes = shard_sizes
        self.epoch = -1
        self.cursor = 0
        self.order = np.empty(0, dtype=np.int64)

    def _advance_epoch(self) -> None:
        self.epoch += 1
        self.cursor = 0
        if self.shard_sizes is None:
            self.order = _epoch_order_flat(self.seed, self.epoch, self.n)
        else:
            self.order = _epoch_order_sharded(self.seed, self.epoch, self.shard_sizes)

    def next_batch(self):
        if self.cursor + self.b > self.order.size:
            self._advance_epoch()
        batch = self.order[self.cursor : self.cursor + self.b]
        self.cursor += self.b
        return batch, self.epoch


def _lr_at(cfg: TrainConfig, step: int) -> float:
    base = cfg.learning_rate
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return base * (step + 1) / cfg.warmup_steps
    if cfg.lr_schedule == "constant":
        return base
    span = max(cfg.steps - cfg.warmup_steps, 1)
    progress = (step - cfg.warmup_steps) / span
    return base * 0.5 * (1.0 + math.cos(math.pi * progress))


def _aug_index(cfg: TrainConfig, epoch: int, sample_ids: np.ndarray, a_total: int) -> np.ndarray:
    if a_total == 1:
        return np.zeros(sample_ids.shape[0], dtype=np.int64)
    if cfg.aug_selection == "cycle":
        return np.full(sample_ids.shape[0], epoch % a_total, dtype=np.int64)
    draws = rng.uniform01(cfg.seed, rng.AUG_SEED, sample_ids.astype(np.uint64), epoch)
    return np.minimum((draws * a_total).astype(np.int64), a_total - 1)


def evaluate(model, world: World, eval_samples: int = 512, retrieval_samples: int = 256) -> EvalReport:
    """Zero-shot accuracy on the eval split plus retrieval@1 both directions
    over a disjoint held-out block of (image, ground-truth caption) pairs."""
    images, _, classes = sample_arrays(world, "eval", 0, eval_samples)
    img_emb = model.encode_images(images)
    prompt_emb = model.encode_texts(zero_shot_prompts(world))
    pred = np.argmax(img_emb @ prompt_emb.T, axis=1)
    zeroshot = float(np.mean(pred == classes))

    r_images, r_captions, _ = sample_arrays(world, "eval", eval_samples, retrieval_samples)
    ri = model.encode_images(r_images)
    rt = model.encode_texts(r_captions)
    sims = ri @ rt.T
    diag = np.arange(retrieval_samples)
    i2t = float(np.mean(np.argmax(sims, axis=1) == diag))
    t2i = float(np.mean(np.argmax(sims, axis=0) == diag))
    return EvalReport(zeroshot_acc=zeroshot, retrieval_i2t_at1=i2t, retrieval_t2i_at1=t2i)


def _combined_loss(slot_batches: list, loss_cfg: LossConfig) -> LossReport:
    if len(slot_batches) == 1:
        r = total_loss(slot_batches[0], loss_cfg)
        w = loss_cfg.gt_caption_weight
        return LossReport(
            clip_loss=w * r.clip_loss,
            distill_loss=w * r.distill_loss,
            per_teacher_terms=[(w * a, w * b) for a, b in r.per_teacher_terms],
            total=w * r.total,
            grad_phi_img=w * r.grad_phi_img,
            grad_phi_txt=None,
            grad_student_scale=w * r.grad_student_scale,
            per_slot=[r],
            slot_weights=(w,),
        )
    return caption_term_expansion(slot_batches, loss_cfg)


def train(cfg: TrainConfig, checkpoints: Optional[Sequence[int]] = None, prepared=None) -> TrainResult:
    """Run the SGD loop; returns the trained student plus evaluation,
    per-step CSV, and any requested mid-run checkpoint evaluations."""
    checkpoints = sorted(set(checkpoints or []))

    if cfg.unreinforced:
        world = build_world(cfg.world) if prepared is None else prepared
        data = None
        n_samples = cfg.train_samples
        shard_sizes = None
        teacher_idx: list = []
        teacher_scales: tuple = ()
        side = world.config.image_side
        images, gt_captions, _ = sample_arrays(world, "train", 0, n_samples)
        images = images.astype(np.float64)
        gt_captions = gt_captions.astype(np.float64)
        syn_captions = None
        n_stored_syn = 0
    else:
        data = _ShardedData(cfg.data_manifest) if prepared is None else prepared
        world_cfg = data.world_config
        if cfg.world is not None and cfg.world.to_dict() != world_cfg.to_dict():
            raise ValueError("train config world disagrees with the manifest's world")
        world = build_world(world_cfg)
        if data.header.world_fingerprint != world.fingerprint:
            raise ValueError(
                f"shards were generated for world {data.header.world_fingerprint}, "
                f"got {world.fingerprint}"
            )
        n_samples = data.num_samples
        shard_sizes = data.shard_sizes
        teacher_idx = data.teacher_indices(cfg.teacher_subset)
        if cfg.loss.distill_weight > 0 and not teacher_idx:
            raise ValueError("distill_weight > 0 requires at least one teacher")
        if cfg.use_stored_teacher_scales:
            teacher_scales = tuple(data.header.teachers[k].logit_scale for k in teacher_idx)
        else:
            teacher_scales = tuple(cfg.loss.teacher_scales)
            if len(teacher_scales) != len(teacher_idx):
                raise ValueError(
                    f"{len(teacher_scales)} teacher scales for {len(teacher_idx)} teachers"
                )
        n_stored_syn = data.header.num_synthetic_captions
        if cfg.active_syn_captions > n_stored_syn:
            raise ValueError(
                f"active_syn_captions={cfg.active_syn_captions} exceeds stored N={n_stored_syn}"
            )
        side = world.config.image_side
        images = data.images
        gt_captions = data.gt_captions
        syn_captions = data.syn_captions

    student = StudentModel(
        embed_dim=cfg.student_embed_dim,
        caption_dim=world.config.caption_dim,
        seed=cfg.seed,
    )
    w_img = student.W_img
    w_txt = student.W_txt
    v_img = np.zeros_like(w_img)
    v_txt = np.zeros_like(w_txt)
    v_scale = 0.0
    s_hat = cfg.loss.student_scale
    ema_img = w_img.copy() if cfg.ema_decay else None
    ema_txt = w_txt.copy() if cfg.ema_decay else None

    base_loss = dataclasses.replace(cfg.loss, teacher_scales=teacher_scales)
    stream = _BatchStream(cfg.seed, n_samples, cfg.batch_size, shard_sizes)
    n_slots = 1 + cfg.active_syn_captions

    csv_lines = [loss_csv_header(len(teacher_idx))]
    step_seconds = []
    checkpoint_evals = []
    first_loss = math.nan
    last_loss = math.nan
    scale_lo, scale_hi = STUDENT_SCALE_RANGE

    def snapshot_student() -> StudentModel:
        snap = StudentModel(
            embed_dim=cfg.student_embed_dim,
            caption_dim=world.config.caption_dim,
            seed=cfg.seed,
        )
        if cfg.ema_decay:
            snap.W_img = ema_img.copy()
            snap.W_txt = ema_txt.copy()
        else:
            snap.W_img = w_img.copy()
            snap.W_txt = w_txt.copy()
        return snap

    for step in range(cfg.steps):
        t0 = time.perf_counter()
        batch, epoch = stream.next_batch()

        if cfg.unreinforced:
            views = np.empty((cfg.batch_size, side * side), dtype=np.float64)
            for i, m in enumerate(batch):
                sid = sample_id_for("train", int(m))
                seed = int(rng.hash64(world.config.seed, rng.PLAIN_AUG_SEED, sid, epoch))
                views[i] = apply(images[m], draw_params(seed, side)).pixels
            psi_img_sel: list = []
            slot_caps = [gt_captions[batch]]
        else:
            a_idx = _aug_index(cfg, epoch, data.sample_ids[batch], data.header.num_augmentations)
            views = np.empty((cfg.batch_size, side * side), dtype=np.float64)
            for i, m in enumerate(batch):
                views[i] = replay(images[m], data.aug_params[m][a_idx[i]]).pixels
            psi_img_sel = [data.teacher_img[k][batch, a_idx] for k in teacher_idx]
            slot_caps = [gt_captions[batch]]
            for j in range(1, n_slots):
                slot_caps.append(syn_captions[batch, j - 1])

        pooled = avgpool(views, side)
        raw_img = pooled @ w_img.T
        phi_img = l2_normalize_rows(raw_img)

        raw_txts = [caps @ w_txt.T for caps in slot_caps]
        phi_txts = [l2_normalize_rows(r) for r in raw_txts]

        slot_batches = []
        for j in range(n_slots):
            if cfg.unreinforced or not teacher_idx:
                psi_txt_sel: list = []
                psi_img_j: list = []
            else:
                psi_txt_sel = [data.teacher_txt[k][batch, j] for k in teacher_idx]
                psi_img_j = psi_img_sel
            slot_batches.append(
                BatchEmbeddings(phi_img, phi_txts[j], psi_img_j, psi_txt_sel)
            )

        loss_cfg = dataclasses.replace(base_loss, student_scale=s_hat)
        report = _combined_loss(slot_batches, loss_cfg)
        if not math.isfinite(report.total):
            raise FloatingPointError(f"non-finite loss {report.total} at step {step}")
        if step == 0:
            first_loss = report.total
        last_loss = report.total
        csv_lines.append(loss_csv_row(step, report, s_hat))

        g_wimg = l2_normalize_rows_vjp(raw_img, report.grad_phi_img).T @ pooled
        g_wtxt = np.zeros_like(w_txt)
        assert report.per_slot is not None and report.slot_weights is not None
        for j, (weight, slot_report) in enumerate(zip(report.slot_weights, report.per_slot)):
            g_slot = l2_normalize_rows_vjp(raw_txts[j], weight * slot_report.grad_phi_txt)
            g_wtxt += g_slot.T @ slot_caps[j]

        lr = _lr_at(cfg, step)
        if cfg.momentum > 0:
            v_img = cfg.momentum * v_img + g_wimg
            v_txt = cfg.momentum * v_txt + g_wtxt
            w_img -= lr * v_img
            w_txt -= lr * v_txt
        else:
            w_img -= lr * g_wimg
            w_txt -= lr * g_wtxt
        if cfg.loss.student_scale_trainable:
            if cfg.momentum > 0:
                v_scale = cfg.momentum * v_scale + report.grad_student_scale
                s_hat -= lr * v_scale
            else:
                s_hat -= lr * report.grad_student_scale
            s_hat = min(max(s_hat, scale_lo), scale_hi)
        if cfg.ema_decay:
            ema_img = cfg.ema_decay * ema_img + (1.0 - cfg.ema_decay) * w_img
            ema_txt = cfg.ema_decay * ema_txt + (1.0 - cfg.ema_decay) * w_txt

        step_seconds.append(time.perf_counter() - t0)

        if checkpoints and (step + 1) in checkpoints:
            snap = snapshot_student()
            rep = evaluate(snap, world, cfg.eval_samples, cfg.retrieval_samples)
            rep.steps_seen = step + 1
            rep.samples_seen = (step + 1) * cfg.batch_size
            checkpoint_evals.append(
                CheckpointEval(step=step + 1, samples_seen=(step + 1) * cfg.batch_size, report=rep)
            )

    final_student = snapshot_student()
    final_report = evaluate(final_student, world, cfg.eval_samples, cfg.retrieval_samples)
    final_report.steps_seen = cfg.steps
    final_report.samples_seen = cfg.steps * cfg.batch_size
    final_report.wall_clock_per_step = float(np.median(step_seconds)) if step_seconds else 0.0

    return TrainResult(
        student=final_student,
        student_scale=float(s_hat),
        eval_report=final_report,
        csv_text="\n".join(csv_lines) + "\n",
        checkpoints=checkpoint_evals,
        step_seconds=step_seconds,
        final_loss=float(last_loss),
        first_loss=float(first_loss),
    )
