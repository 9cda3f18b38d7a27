"""Command-line interface.

Subcommands mirror the pipeline stages: `reinforce` generates shards from a
job config, `train` runs the student, `sweep`/`curve`/`bench` drive the
ablation protocols, `inspect` summarizes a shard file.  All ablation outputs
are a CSV table plus a JSON summary in the chosen output directory.  Exit
status is 0 only on full success; invariant breaches, corrupt files, and
incomplete generation exit nonzero.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

from . import ablations, coordinator, shards
from .encoders import save_model
from .trainer import TrainConfig, train


def _load_json(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _write(path: str, text: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _write_json(path: str, obj) -> None:
    _write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _eval_dict(report) -> dict:
    return report.to_dict()


def cmd_reinforce(args) -> int:
    job = coordinator.GenerationJob.from_json_file(args.config)
    if args.parallelism is not None:
        job = dataclasses.replace(job, parallelism=args.parallelism)
    manifest_path = job.manifest_path()
    if os.path.exists(manifest_path) and not args.resume:
        existing = coordinator.Manifest.load(manifest_path)
        started = [e for e in existing.entries if e.status != "pending"]
        if started and not existing.all_done():
            print(
                f"error: {manifest_path} shows prior progress; pass --resume to continue",
                file=sys.stderr,
            )
            return 1

    def progress(index: int, total: int, content_hash: str) -> None:
        print(f"shard {index + 1}/{total} done hash={content_hash}", flush=True)

    report = coordinator.run(job, progress=progress)
    for i in sorted(report.skipped):
        print(f"shard {i + 1}/{job.num_shards} verified hash={report.hashes[i]}", flush=True)
    print(
        f"reinforce complete: {len(report.generated)} generated, "
        f"{len(report.skipped)} skipped, {report.elapsed_seconds:.1f}s"
    )
    return 0


def cmd_train(args) -> int:
    cfg = TrainConfig.from_json_file(args.config)
    result = train(cfg)
    out = args.out
    _write(os.path.join(out, "steps.csv"), result.csv_text)
    summary = {
        "eval": _eval_dict(result.eval_report),
        "student_scale": result.student_scale,
        "first_loss": result.first_loss,
        "final_loss": result.final_loss,
    }
    _write_json(os.path.join(out, "eval.json"), summary)
    _write_json(os.path.join(out, "config.json"), cfg.to_dict())
    save_model(os.path.join(out, "student.model"), result.student)
    print(
        f"train complete: zeroshot={result.eval_report.zeroshot_acc:.4f} "
        f"i2t@1={result.eval_report.retrieval_i2t_at1:.4f} "
        f"t2i@1={result.eval_report.retrieval_t2i_at1:.4f}"
    )
    return 0


def cmd_sweep(args) -> int:
    spec = _load_json(args.config)
    base = TrainConfig.from_dict(spec["train"])
    out = args.out
    if args.kind == "logit-scale":
        result = ablations.sweep_logit_scale(base, spec["teacher_id"], spec["grid"])
        _write(os.path.join(out, "sweep_logit_scale.csv"), result.csv_text)
        _write_json(
            os.path.join(out, "sweep_logit_scale.json"),
            {
                "best_setting": result.best_setting,
                "interior_optimum": result.interior_optimum,
                "flat_window_spread": result.flat_window_spread,
                "flat": result.flat,
                "grid": [
                    {"scale": s, "eval": _eval_dict(rep)} for s, rep in result.grid
                ],
            },
        )
        print(
            f"sweep complete: best scale {result.best_setting} "
            f"(interior={result.interior_optimum})"
        )
    elif args.kind == "ensemble":
        table = ablations.compare_ensembles(base, spec["rosters"])
        _write(os.path.join(out, "ensembles.csv"), table.csv_text)
        _write_json(
            os.path.join(out, "ensembles.json"),
            [{"roster": row.label, "eval": _eval_dict(row.report)} for row in table.rows],
        )
        best = max(table.rows, key=lambda r: r.report.zeroshot_acc)
        print(f"ensemble comparison complete: best roster {best.label}")
    elif args.kind == "captions":
        table = ablations.caption_count_ablation(base, spec["n_values"])
        _write(os.path.join(out, "captions.csv"), table.csv_text)
        _write_json(
            os.path.join(out, "captions.json"),
            [{"syn_captions": j, "eval": _eval_dict(rep)} for j, rep in table.rows],
        )
        print("caption ablation complete")
    else:  # pragma: no cover - argparse restricts choices
        raise ValueError(f"unknown sweep kind {args.kind}")
    return 0


def cmd_curve(args) -> int:
    spec = _load_json(args.config)
    result = ablations.efficiency_curve(
        TrainConfig.from_dict(spec["reinforced"]),
        TrainConfig.from_dict(spec["plain"]),
        spec["checkpoints"],
    )
    _write(os.path.join(args.out, "efficiency_curve.csv"), result.csv_text)
    _write_json(
        os.path.join(args.out, "efficiency_curve.json"),
        {
            "plain_final_acc": result.plain_final_acc,
            "matching_samples": result.matching_samples,
            "sample_ratio": result.sample_ratio if result.sample_ratio != float("inf") else None,
        },
    )
    ratio = result.sample_ratio
    print(f"efficiency curve complete: sample ratio {'inf' if ratio == float('inf') else f'{ratio:.3f}'}")
    return 0


def cmd_bench(args) -> int:
    spec = _load_json(args.config)
    report = ablations.overhead_bench(
        TrainConfig.from_dict(spec["reinforced"]),
        TrainConfig.from_dict(spec["plain"]),
        timed_steps=int(spec.get("timed_steps", 500)),
        warmup_steps=int(spec.get("warmup_steps", 50)),
    )
    _write_json(os.path.join(args.out, "overhead.json"), report.to_dict())
    print(
        f"overhead bench complete: reinforced {report.reinforced_median * 1e3:.3f} ms/step, "
        f"plain {report.plain_median * 1e3:.3f} ms/step, ratio {report.ratio:.3f}"
    )
    return 0


def cmd_inspect(args) -> int:
    print(shards.inspect(args.shard))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dr-forge",
        description="Reinforced image-text dataset generation and distilled training",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("reinforce", help="generate reinforced shards from a job config")
    p.add_argument("--config", required=True, help="job JSON path")
    p.add_argument("--parallelism", type=int, default=None, help="worker thread count override")
    p.add_argument("--resume", action="store_true", help="continue a partially generated dataset")
    p.set_defaults(func=cmd_reinforce)

    p = sub.add_parser("train", help="train a student from a train config")
    p.add_argument("--config", required=True, help="train JSON path")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="run an ablation sweep")
    p.add_argument("kind", choices=["logit-scale", "ensemble", "captions"])
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("curve", help="sample-efficiency curves, reinforced vs plain")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_curve)

    p = sub.add_parser("bench", help="benchmarks")
    p.add_argument("kind", choices=["overhead"])
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("inspect", help="summarize a shard file")
    p.add_argument("shard", help="path to a shard")
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
