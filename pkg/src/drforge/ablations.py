"""Ablation protocols over the training harness: logit-scale sweep, teacher
ensemble comparison, synthetic-caption saturation, sample-efficiency curves,
and per-step overhead measurement.

Every table is emitted as CSV with a schema version header line and contains
only deterministic values (settings and accuracies, never wall-clock), so
re-running a config reproduces the bytes.  Timing lives in the JSON-able
report objects instead.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .trainer import TrainConfig, TrainResult, _ShardedData, train

FLATNESS_WINDOW = 5.0  # logit-scale units around the best point
FLATNESS_SPREAD = 0.02  # accuracy spread considered "flat"


def _fmt(v: float) -> str:
    return "%.17g" % v


def _load_data(cfg: TrainConfig, prepared=None):
    if prepared is not None:
        return prepared
    if cfg.unreinforced:
        return None
    return _ShardedData(cfg.data_manifest)


@dataclass
class SweepResult:
    grid: list  # (setting, EvalReport) pairs
    best_setting: float
    interior_optimum: bool
    flat_window_spread: float
    flat: bool
    csv_text: str = ""

    def __post_init__(self):
        if not self.grid:
            raise ValueError("sweep grid is empty")


def sweep_logit_scale(
    base_cfg: TrainConfig,
    teacher_id: str,
    grid: Sequence[float],
    prepared=None,
) -> SweepResult:
    """Single-teacher distillation accuracy across a logit-scale grid."""
    grid = [float(g) for g in grid]
    if len(grid) < 3:
        raise ValueError(f"grid needs at least 3 points, got {len(grid)}")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError(f"grid must be strictly ascending, got {grid}")
    data = _load_data(base_cfg, prepared)

    rows = []
    for scale in grid:
        cfg = dataclasses.replace(
            base_cfg,
            teacher_subset=(teacher_id,),
            use_stored_teacher_scales=False,
            loss=dataclasses.replace(
                base_cfg.loss, distill_weight=1.0, teacher_scales=(scale,)
            ),
        )
        result = train(cfg, prepared=data)
        rows.append((scale, result.eval_report))

    accs = [r.zeroshot_acc for _, r in rows]
    best_i = int(np.argmax(accs))
    best_scale = grid[best_i]
    window = [rep.zeroshot_acc for scale, rep in rows if abs(scale - best_scale) <= FLATNESS_WINDOW]
    spread = max(window) - min(window) if window else 0.0

    lines = ["# schema=drforge.sweep_logit_scale.v1", "scale,zeroshot_acc,retrieval_i2t_at1,retrieval_t2i_at1"]
    for scale, rep in rows:
        lines.append(
            f"{_fmt(scale)},{_fmt(rep.zeroshot_acc)},{_fmt(rep.retrieval_i2t_at1)},{_fmt(rep.retrieval_t2i_at1)}"
        )
    return SweepResult(
        grid=rows,
        best_setting=best_scale,
        interior_optimum=0 < best_i < len(grid) - 1,
        flat_window_spread=float(spread),
        flat=spread <= FLATNESS_SPREAD,
        csv_text="\n".join(lines) + "\n",
    )


@dataclass
class EnsembleRow:
    label: str
    roster: tuple
    report: object


@dataclass
class EnsembleTable:
    rows: list
    csv_text: str


def compare_ensembles(base_cfg: TrainConfig, rosters: Sequence[Sequence[str]], prepared=None) -> EnsembleTable:
    """Train one student per teacher roster at the stored per-teacher scales."""
    if not rosters:
        raise ValueError("need at least one roster")
    data = _load_data(base_cfg, prepared)
    rows = []
    for roster in rosters:
        roster = tuple(roster)
        if not roster:
            raise ValueError("rosters must be nonempty")
        cfg = dataclasses.replace(base_cfg, teacher_subset=roster, use_stored_teacher_scales=True)
        result = train(cfg, prepared=data)
        rows.append(EnsembleRow(label="+".join(roster), roster=roster, report=result.eval_report))
    lines = ["# schema=drforge.compare_ensembles.v1", "roster,zeroshot_acc,retrieval_i2t_at1,retrieval_t2i_at1"]
    for row in rows:
        rep = row.report
        lines.append(
            f"{row.label},{_fmt(rep.zeroshot_acc)},{_fmt(rep.retrieval_i2t_at1)},{_fmt(rep.retrieval_t2i_at1)}"
        )
    return EnsembleTable(rows=rows, csv_text="\n".join(lines) + "\n")


@dataclass
class CaptionAblationTable:
    rows: list  # (j, EvalReport)
    csv_text: str


def caption_count_ablation(base_cfg: TrainConfig, n_values: Sequence[int], prepared=None) -> CaptionAblationTable:
    """Accuracy as a function of active synthetic captions per sample."""
    if not n_values:
        raise ValueError("need at least one caption count")
    data = _load_data(base_cfg, prepared)
    rows = []
    for j in n_values:
        cfg = dataclasses.replace(base_cfg, active_syn_captions=int(j))
        result = train(cfg, prepared=data)
        rows.append((int(j), result.eval_report))
    lines = ["# schema=drforge.caption_count.v1", "syn_captions,zeroshot_acc,retrieval_i2t_at1,retrieval_t2i_at1"]
    for j, rep in rows:
        lines.append(
            f"{j},{_fmt(rep.zeroshot_acc)},{_fmt(rep.retrieval_i2t_at1)},{_fmt(rep.retrieval_t2i_at1)}"
        )
    return CaptionAblationTable(rows=rows, csv_text="\n".join(lines) + "\n")


@dataclass
class EfficiencyCurves:
    reinforced_curve: list  # (samples_seen, zeroshot_acc), monotone samples
    plain_curve: list
    plain_final_acc: float
    matching_samples: Optional[int]  # reinforced samples to reach plain final
    sample_ratio: float  # matching_samples / plain total samples (inf if never)
    csv_text: str = ""


def efficiency_curve(
    reinforced_cfg: TrainConfig,
    plain_cfg: TrainConfig,
    checkpoints: Sequence[int],
    reinforced_prepared=None,
    plain_prepared=None,
) -> EfficiencyCurves:
    """Accuracy-vs-samples curves for both pipelines plus the sample ratio at
    which the reinforced run first matches the plain run's final accuracy."""
    if reinforced_cfg.steps * reinforced_cfg.batch_size != plain_cfg.steps * plain_cfg.batch_size:
        raise ValueError("efficiency comparison requires identical sample budgets")
    checkpoints = sorted(set(int(c) for c in checkpoints))
    if any(c < 1 or c > reinforced_cfg.steps for c in checkpoints):
        raise ValueError("checkpoints must fall within the training run")

    def curve_of(result: TrainResult, cfg: TrainConfig) -> list:
        points = [(c.samples_seen, c.report.zeroshot_acc) for c in result.checkpoints]
        final = (cfg.steps * cfg.batch_size, result.eval_report.zeroshot_acc)
        if not points or points[-1][0] != final[0]:
            points.append(final)
        return points

    r_result = train(reinforced_cfg, checkpoints=checkpoints, prepared=reinforced_prepared)
    p_result = train(plain_cfg, checkpoints=checkpoints, prepared=plain_prepared)
    r_curve = curve_of(r_result, reinforced_cfg)
    p_curve = curve_of(p_result, plain_cfg)
    plain_final = p_curve[-1][1]

    matching = None
    for samples, acc in r_curve:
        if acc >= plain_final:
            matching = samples
            break
    total = p_curve[-1][0]
    ratio = math.inf if matching is None else matching / total

    lines = ["# schema=drforge.efficiency_curve.v1", "pipeline,samples_seen,zeroshot_acc"]
    for samples, acc in r_curve:
        lines.append(f"reinforced,{samples},{_fmt(acc)}")
    for samples, acc in p_curve:
        lines.append(f"plain,{samples},{_fmt(acc)}")
    return EfficiencyCurves(
        reinforced_curve=r_curve,
        plain_curve=p_curve,
        plain_final_acc=plain_final,
        matching_samples=matching,
        sample_ratio=ratio,
        csv_text="\n".join(lines) + "\n",
    )


@dataclass
class OverheadReport:
    reinforced_median: float
    plain_median: float
    reinforced_mad: float
    plain_mad: float
    ratio: float
    timed_steps: int

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _median_and_mad(values: Sequence[float]) -> tuple:
    arr = np.asarray(values, dtype=np.float64)
    med = float(np.median(arr))
    return med, float(np.median(np.abs(arr - med)))


def overhead_bench(
    reinforced_cfg: TrainConfig,
    plain_cfg: TrainConfig,
    timed_steps: int = 500,
    warmup_steps: int = 50,
    reinforced_prepared=None,
    plain_prepared=None,
) -> OverheadReport:
    """Median per-step wall-clock of reinforced vs plain training."""
    if timed_steps < 500:
        raise ValueError(f"need >= 500 timed steps, got {timed_steps}")
    total = warmup_steps + timed_steps

    def run(cfg: TrainConfig, prepared) -> tuple:
        cfg = dataclasses.replace(cfg, steps=total)
        result = train(cfg, prepared=prepared)
        return _median_and_mad(result.step_seconds[warmup_steps:])

    r_med, r_mad = run(reinforced_cfg, reinforced_prepared)
    p_med, p_mad = run(plain_cfg, plain_prepared)
    return OverheadReport(
        reinforced_median=r_med,
        plain_median=p_med,
        reinforced_mad=r_mad,
        plain_mad=p_mad,
        ratio=r_med / p_med,
        timed_steps=timed_steps,
    )
