"""Training objective: symmetric contrastive loss, ensemble KL distillation
with per-teacher logit scales, and the lambda-mixed total.

Conventions: all similarity matrices are scaled by a multiplicative logit
scale s (softmax(s * U V^T) row-wise), the temperature being 1/s.  kl_rows
averages over rows, which absorbs the 1/b factor; the remaining 1/(2K) is
applied here.  Gradients are analytic, taken with respect to the
pre-normalization student embeddings, and checked against central finite
differences by grad_check.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .kernels import kl_rows, l2_normalize_rows, l2_normalize_rows_vjp, softmax_rows
from .validation import as_float_matrix, check_unit_rows

STUDENT_SCALE_INIT = math.exp(2.996)
STUDENT_SCALE_RANGE = (1.0, 100.0)
DEFAULT_TEACHER_SCALES = (70.0, 60.0)


@dataclass(frozen=True)
class LossConfig:
    distill_weight: float = 0.5  # lambda in [0, 1]
    student_scale: float = STUDENT_SCALE_INIT
    student_scale_trainable: bool = True
    teacher_scales: tuple = DEFAULT_TEACHER_SCALES
    gt_caption_weight: float = 1.0
    syn_caption_weight: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.distill_weight <= 1.0:
            raise ValueError(f"distill_weight must be in [0, 1], got {self.distill_weight}")
        if not self.student_scale > 0:
            raise ValueError(f"student_scale must be > 0, got {self.student_scale}")
        object.__setattr__(self, "teacher_scales", tuple(float(s) for s in self.teacher_scales))
        for s in self.teacher_scales:
            if not s > 0:
                raise ValueError(f"teacher scales must be > 0, got {s}")
        if self.gt_caption_weight < 0 or self.syn_caption_weight < 0:
            raise ValueError("caption weights must be >= 0")

    def to_dict(self) -> dict:
        return {
            "distill_weight": self.distill_weight,
            "student_scale": self.student_scale,
            "student_scale_trainable": self.student_scale_trainable,
            "teacher_scales": list(self.teacher_scales),
            "gt_caption_weight": self.gt_caption_weight,
            "syn_caption_weight": self.syn_caption_weight,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        d = dict(d)
        if "teacher_scales" in d:
            d["teacher_scales"] = tuple(d["teacher_scales"])
        return cls(**d)


class BatchEmbeddings:
    """Unit-norm student and per-teacher embeddings for one batch."""

    def __init__(self, phi_img, phi_txt, psi_img: Sequence = (), psi_txt: Sequence = ()):
        self.phi_img = as_float_matrix(phi_img, "phi_img")
        self.phi_txt = as_float_matrix(phi_txt, "phi_txt")
        self.psi_img = [as_float_matrix(m, f"psi_img[{k}]") for k, m in enumerate(psi_img)]
        self.psi_txt = [as_float_matrix(m, f"psi_txt[{k}]") for k, m in enumerate(psi_txt)]
        if len(self.psi_img) != len(self.psi_txt):
            raise ValueError(
                f"got {len(self.psi_img)} teacher image blocks but {len(self.psi_txt)} text blocks"
            )
        b = self.phi_img.shape[0]
        if b == 0:
            raise ValueError("batch is empty")
        if self.phi_txt.shape != self.phi_img.shape:
            raise ValueError(
                f"phi_img {self.phi_img.shape} and phi_txt {self.phi_txt.shape} disagree"
            )
        check_unit_rows(self.phi_img, "phi_img", tol=1e-9)
        check_unit_rows(self.phi_txt, "phi_txt", tol=1e-9)
        for k, (pi, pt) in enumerate(zip(self.psi_img, self.psi_txt)):
            if pi.shape[0] != b or pt.shape[0] != b:
                raise ValueError(f"teacher {k} batch size disagrees with student batch {b}")
            if pi.shape != pt.shape:
                raise ValueError(f"teacher {k} image/text dims disagree: {pi.shape} vs {pt.shape}")
            check_unit_rows(pi, f"psi_img[{k}]", tol=1e-9)
            check_unit_rows(pt, f"psi_txt[{k}]", tol=1e-9)

    @property
    def batch_size(self) -> int:
        return self.phi_img.shape[0]

    @property
    def num_teachers(self) -> int:
        return len(self.psi_img)


@dataclass
class LossReport:
    clip_loss: float
    distill_loss: float
    per_teacher_terms: list  # K pairs (img->txt KL, txt->img KL), pre 1/(2K)
    total: float
    grad_phi_img: Optional[np.ndarray]
    grad_phi_txt: Optional[np.ndarray]
    grad_student_scale: float = 0.0
    per_slot: Optional[list] = None
    slot_weights: Optional[tuple] = None
    warnings: list = field(default_factory=list)


def _diag_mean_log(p: np.ndarray) -> float:
    eye = np.arange(p.shape[0])
    return float(np.mean(np.log(p[eye, eye])))


def clip_loss(phi_img, phi_txt, scale: float):
    """Symmetric InfoNCE over cosine logits.

    Returns (loss, grad_img, grad_txt, grad_scale), gradients taken with
    respect to the unit-norm embeddings (normalization handled by callers).
    """
    a = as_float_matrix(phi_img, "phi_img")
    b_mat = as_float_matrix(phi_txt, "phi_txt")
    if a.shape != b_mat.shape:
        raise ValueError(f"phi_img {a.shape} and phi_txt {b_mat.shape} disagree")
    b = a.shape[0]
    if b == 0:
        raise ValueError("batch is empty")
    if not scale > 0:
        raise ValueError(f"scale must be > 0, got {scale}")

    sims = a @ b_mat.T
    p_i2t = softmax_rows(sims, scale)
    p_t2i = softmax_rows(sims.T, scale)
    loss = -0.5 * (_diag_mean_log(p_i2t) + _diag_mean_log(p_t2i))

    eye = np.eye(b)
    r_i2t = p_i2t - eye
    r_t2i = p_t2i - eye
    grad_img = (scale / (2.0 * b)) * (r_i2t @ b_mat + r_t2i.T @ b_mat)
    grad_txt = (scale / (2.0 * b)) * (r_t2i @ a + r_i2t.T @ a)
    grad_scale = (np.sum(r_i2t * sims) + np.sum(r_t2i * sims.T)) / (2.0 * b)
    return max(loss, 0.0) if b == 1 else loss, grad_img, grad_txt, float(grad_scale)


def distill_loss(batch: BatchEmbeddings, cfg: LossConfig):
    """Ensemble KL between teacher and student similarity distributions.

    Returns (loss, per_teacher_terms, grad_img, grad_txt, grad_scale).
    """
    k_total = batch.num_teachers
    if k_total == 0:
        raise ValueError("distill_loss requires at least one teacher")
    if len(cfg.teacher_scales) != k_total:
        raise ValueError(
            f"config has {len(cfg.teacher_scales)} teacher scales but batch has {k_total} teachers"
        )
    a, b_mat = batch.phi_img, batch.phi_txt
    b = batch.batch_size
    s_hat = cfg.student_scale

    sims = a @ b_mat.T
    q_i2t = softmax_rows(sims, s_hat)
    q_t2i = softmax_rows(sims.T, s_hat)

    terms = []
    resid_i2t = np.zeros_like(q_i2t)
    resid_t2i = np.zeros_like(q_t2i)
    for k in range(k_total):
        t_sims = batch.psi_img[k] @ batch.psi_txt[k].T
        t_i2t = softmax_rows(t_sims, cfg.teacher_scales[k])
        t_t2i = softmax_rows(t_sims.T, cfg.teacher_scales[k])
        terms.append((kl_rows(t_i2t, q_i2t), kl_rows(t_t2i, q_t2i)))
        resid_i2t += q_i2t - t_i2t
        resid_t2i += q_t2i - t_t2i

    loss = sum(t[0] + t[1] for t in terms) / (2.0 * k_total)
    coeff = s_hat / (2.0 * k_total * b)
    grad_img = coeff * (resid_i2t @ b_mat + resid_t2i.T @ b_mat)
    grad_txt = coeff * (resid_t2i @ a + resid_i2t.T @ a)
    grad_scale = (np.sum(resid_i2t * sims) + np.sum(resid_t2i * sims.T)) / (2.0 * k_total * b)
    return float(loss), terms, grad_img, grad_txt, float(grad_scale)


def total_loss(batch: BatchEmbeddings, cfg: LossConfig) -> LossReport:
    lam = cfg.distill_weight
    c_loss, c_gi, c_gt, c_gs = clip_loss(batch.phi_img, batch.phi_txt, cfg.student_scale)
    if batch.num_teachers > 0:
        d_loss, terms, d_gi, d_gt, d_gs = distill_loss(batch, cfg)
    else:
        if lam > 0:
            raise ValueError("distill_weight > 0 requires teacher embeddings in the batch")
        d_loss, terms = 0.0, []
        d_gi = np.zeros_like(c_gi)
        d_gt = np.zeros_like(c_gt)
        d_gs = 0.0
    total = (1.0 - lam) * c_loss + lam * d_loss
    grad_scale = (1.0 - lam) * c_gs + lam * d_gs
    if not cfg.student_scale_trainable:
        grad_scale = 0.0
    return LossReport(
        clip_loss=float(c_loss),
        distill_loss=float(d_loss),
        per_teacher_terms=terms,
        total=float(total),
        grad_phi_img=(1.0 - lam) * c_gi + lam * d_gi,
        grad_phi_txt=(1.0 - lam) * c_gt + lam * d_gt,
        grad_student_scale=float(grad_scale),
    )


def caption_term_expansion(slot_batches: Sequence[BatchEmbeddings], cfg: LossConfig) -> LossReport:
    """Combine per-caption-slot losses: slot 0 is the ground-truth caption,
    slots 1..N are synthetic; loss = gt_w * L_0 + syn_w * mean_j L_j."""
    if len(slot_batches) == 0:
        raise ValueError("need at least the ground-truth caption slot")
    n_syn = len(slot_batches) - 1
    weights = [cfg.gt_caption_weight]
    if n_syn:
        weights += [cfg.syn_caption_weight / n_syn] * n_syn
    notes = []
    if n_syn == 0 and cfg.syn_caption_weight > 0:
        msg = "no synthetic caption slots; syn_caption_weight contributes nothing"
        notes.append(msg)
        warnings.warn(msg, stacklevel=2)

    reports = [total_loss(sb, cfg) for sb in slot_batches]
    clip = sum(w * r.clip_loss for w, r in zip(weights, reports))
    distill = sum(w * r.distill_loss for w, r in zip(weights, reports))
    total = sum(w * r.total for w, r in zip(weights, reports))
    grad_img = sum(w * r.grad_phi_img for w, r in zip(weights, reports))
    grad_scale = sum(w * r.grad_student_scale for w, r in zip(weights, reports))
    k_total = slot_batches[0].num_teachers
    terms = [
        (
            sum(w * r.per_teacher_terms[k][0] for w, r in zip(weights, reports)),
            sum(w * r.per_teacher_terms[k][1] for w, r in zip(weights, reports)),
        )
        for k in range(k_total)
    ]
    return LossReport(
        clip_loss=float(clip),
        distill_loss=float(distill),
        per_teacher_terms=terms,
        total=float(total),
        grad_phi_img=grad_img,
        grad_phi_txt=None,  # text grads are per slot; see per_slot reports
        grad_student_scale=float(grad_scale),
        per_slot=reports,
        slot_weights=tuple(weights),
        warnings=notes,
    )


def _total_from_raw(x_img: np.ndarray, x_txt: np.ndarray, batch: BatchEmbeddings, cfg: LossConfig):
    normalized = BatchEmbeddings(
        l2_normalize_rows(x_img), l2_normalize_rows(x_txt), batch.psi_img, batch.psi_txt
    )
    return total_loss(normalized, cfg)


def grad_check(batch: BatchEmbeddings, cfg: LossConfig, epsilon: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    The student matrices are treated as pre-normalization variables with the
    normalization inside the differentiated function, so the check covers
    the normalization backward pass too.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon must be in [1e-7, 1e-3], got {epsilon}")
    x_img = batch.phi_img.copy()
    x_txt = batch.phi_txt.copy()
    report = _total_from_raw(x_img, x_txt, batch, cfg)
    analytic = [
        l2_normalize_rows_vjp(x_img, report.grad_phi_img),
        l2_normalize_rows_vjp(x_txt, report.grad_phi_txt),
    ]

    max_rel = 0.0
    for which, x in enumerate((x_img, x_txt)):
        for i in range(x.shape[0]):
            for j in range(x.shape[1]):
                orig = x[i, j]
                x[i, j] = orig + epsilon
                up = _total_from_raw(x_img, x_txt, batch, cfg).total
                x[i, j] = orig - epsilon
                down = _total_from_raw(x_img, x_txt, batch, cfg).total
                x[i, j] = orig
                numeric = (up - down) / (2.0 * epsilon)
                rel = abs(analytic[which][i, j] - numeric) / max(abs(numeric), 1e-8)
                max_rel = max(max_rel, rel)
    return max_rel


def loss_csv_header(num_teachers: int) -> str:
    cols = ["step", "clip", "distill", "total"]
    for k in range(num_teachers):
        cols += [f"teacher{k}_i2t", f"teacher{k}_t2i"]
    cols += ["grad_img_norm", "grad_txt_norm", "grad_scale", "student_scale"]
    return ",".join(cols)


def loss_csv_row(step: int, report: LossReport, student_scale: float) -> str:
    def fmt(v: float) -> str:
        return "%.17g" % v

    grad_txt_norm = 0.0
    if report.grad_phi_txt is not None:
        grad_txt_norm = float(np.linalg.norm(report.grad_phi_txt))
    elif report.per_slot:
        assert report.slot_weights is not None
        acc = 0.0
        for w, slot in zip(report.slot_weights, report.per_slot):
            acc += float(np.linalg.norm(w * slot.grad_phi_txt)) ** 2
        grad_txt_norm = math.sqrt(acc)
    cols = [str(step), fmt(report.clip_loss), fmt(report.distill_loss), fmt(report.total)]
    for pair in report.per_teacher_terms:
        cols += [fmt(pair[0]), fmt(pair[1])]
    cols += [
        fmt(float(np.linalg.norm(report.grad_phi_img))),
        fmt(grad_txt_norm),
        fmt(report.grad_student_scale),
        fmt(student_scale),
    ]
    return ",".join(cols)
