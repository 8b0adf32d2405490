"""Command-line surface: cohort generation, runs, evaluation, reports.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
A run directory only receives its manifest after every artifact is in place,
so the presence of ``manifest.json`` marks a complete run.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import (
    ConfigError,
    config_digest,
    load_config,
    parse_cohort_spec_text,
    serialize_config,
)
from .fileio import (
    FormatError,
    append_jsonl,
    read_cohort,
    read_detections,
    read_jsonl,
    read_versioned_json,
    state_from_dict,
    write_cohort,
    write_json_atomic,
)
from .geometry import bins_of_volumes, boxes_to_array, volumes_cc
from .loop import (
    ResumeMismatchError,
    RoundRecord,
    run_experiment,
    write_cohort_files,
)
from .matching import FrocCurve, average_precision, froc, pr_curve, sensitivity_at
from .priors import histogram_of_boxes
from .report import emit_report
from .seeding import seed_for
from .simulate import generate_cohort, infer

FROC_BUDGETS = (0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0)
MANIFEST_FORMAT = "manifest"


def _cmd_generate(args) -> int:
    try:
        spec = parse_cohort_spec_text(Path(args.spec).read_text(), seed=args.seed)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    subjects = generate_cohort(spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_cohort(out, subjects, spec.spacing)
    boxes = [b for s in subjects for b in s.gt_boxes]
    print(f"wrote {out}")
    print(f"subjects: {len(subjects)}")
    print(f"lesions:  {len(boxes)}")
    if boxes:
        hist = histogram_of_boxes(boxes, spec.binning, spec.spacing)
        print("bin histogram: " + " ".join(f"{v:.3f}" for v in hist))
    return 0


def _cmd_run(args) -> int:
    cfg = load_config(args.config, **({"seed": args.seed} if args.seed is not None else {}))
    out = Path(args.out)
    result = run_experiment(cfg, out_dir=out, stop_after_rounds=args.stop_after_round)
    if not result.completed:
        print(
            f"stopped after {sum(len(r) for r in result.records.values())} recorded rounds; "
            f"rerun the same command to resume",
            file=sys.stderr,
        )
        return 1
    cohort_paths = write_cohort_files(cfg, result.data, out)
    config_path = out / "config.txt"
    config_path.write_text(serialize_config(cfg))
    files = {
        "config": str(config_path),
        "checkpoint": str(out / "checkpoint.json"),
        "round_log": str(out / "round_log.jsonl"),
        "test_eval": str(out / "test_eval.json"),
        "cohort_source": cohort_paths["source"],
        "cohort_target": cohort_paths["target"],
    }
    missing = [p for p in files.values() if not Path(p).exists()]
    if missing:
        print(f"error: missing artifacts, not writing manifest: {missing}", file=sys.stderr)
        return 1
    write_json_atomic(
        out / "manifest.json",
        {
            "format": MANIFEST_FORMAT,
            "version": 1,
            "config_digest": result.digest,
            "seed": cfg.seed,
            "code_version": __version__,
            "files": files,
        },
    )
    for arm in cfg.arms:
        aps = result.test_eval[arm]["aps"]
        summary = " ".join(f"AP@{k}={v:.3f}" for k, v in aps.items())
        print(f"{arm:24s} {summary}")
    print(f"manifest: {out / 'manifest.json'}")
    return 0


def _load_detections_for_eval(args, subjects, binning, spacing):
    if args.detections:
        return read_detections(args.detections)
    payload = read_versioned_json(args.checkpoint, "checkpoint")
    if args.arm not in payload["arms"]:
        raise FormatError(
            f"{args.checkpoint}: no arm {args.arm!r}; has {sorted(payload['arms'])}"
        )
    detector, _, anchors = state_from_dict(payload["arms"][args.arm])
    return {
        s.id: infer(detector, s, anchors, binning, spacing, seed_for(args.seed, "cli-eval", i))
        for i, s in enumerate(subjects)
    }


def _cmd_eval(args) -> int:
    if bool(args.detections) == bool(args.checkpoint):
        print("error: provide exactly one of --detections or --checkpoint", file=sys.stderr)
        return 2
    subjects, spacing = read_cohort(args.cohort)
    from .geometry import BinningConfig

    binning = BinningConfig()
    dets = _load_detections_for_eval(args, subjects, binning, spacing)
    gts = {s.id: list(s.gt_boxes) for s in subjects}
    orphans = sorted(set(dets) - set(gts))
    if orphans:
        print(f"error: detections reference unknown subjects: {orphans}", file=sys.stderr)
        return 1
    ious = [float(v) for v in args.iou.split(",") if v.strip()]
    report = {"aps": {}, "sens_at": {}}
    for t in ious:
        report["aps"][str(t)] = average_precision(dets, gts, t)
        print(f"AP@{t:g} = {report['aps'][str(t)]:.4f}")
    curve = froc(dets, gts, args.froc_iou)
    for b in FROC_BUDGETS:
        report["sens_at"][str(b)] = sensitivity_at(curve, b)
        print(f"sensitivity @ {b:g} FP/scan = {report['sens_at'][str(b)]:.4f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        report["froc_points"] = [
            [c, f, s] for c, f, s in zip(curve.cutoffs, curve.fp_per_scan, curve.sensitivity)
        ]
        report["pr_points"] = [list(p) for p in pr_curve(dets, gts, ious[0])]
        write_json_atomic(out / "eval.json", {"format": "evalreport", "version": 1, **report})
        print(f"wrote {out / 'eval.json'}")
    return 0


def _cmd_report(args) -> int:
    log_path = Path(args.log)
    if log_path.is_dir():
        log_path = log_path / "round_log.jsonl"
    lines = read_jsonl(log_path)
    if not lines or lines[0].get("kind") != "header" or lines[0].get("format") != "roundlog":
        raise FormatError(f"{log_path}: missing round-log header")
    if lines[0].get("version") != 1:
        raise FormatError(f"{log_path}: unsupported round-log version")
    records: dict[str, list[RoundRecord]] = {}
    for line in lines[1:]:
        if line.get("kind") != "round":
            continue
        rec = RoundRecord.from_json(line["record"])
        records.setdefault(rec.arm, []).append(rec)
    test_eval = {}
    test_path = log_path.parent / "test_eval.json"
    if test_path.exists():
        test_eval = read_versioned_json(test_path, "testeval")["arms"]
    written = emit_report(records, test_eval, args.out)
    for path in written:
        print(f"wrote {path}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="boxshift",
        description=(
            "Self-training for 3D lesion box detection under label shift: "
            "synthetic cohorts, adaptation runs, AP/FROC evaluation, reports."
        ),
    )
    parser.add_argument("--version", action="version", version=f"boxshift {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate a synthetic cohort file from a spec")
    g.add_argument("spec", help="cohort spec file (key = value)")
    g.add_argument("--out", required=True, help="cohort file to write")
    g.add_argument("--seed", type=int, default=None, help="override the spec seed")

    r = sub.add_parser("run", help="run an adaptation experiment")
    r.add_argument("--config", required=True, help="run config file (key = value)")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--seed", type=int, default=None, help="override the config seed")
    r.add_argument(
        "--stop-after-round",
        type=int,
        default=None,
        help="stop after N total (arm, round) steps; rerun to resume",
    )

    e = sub.add_parser("eval", help="evaluate detections against a cohort")
    e.add_argument("--cohort", required=True, help="cohort file with ground truth")
    e.add_argument("--detections", help="detections file to score")
    e.add_argument("--checkpoint", help="checkpoint to run inference from instead")
    e.add_argument("--arm", default="prior_guided_anchor", help="arm to read from the checkpoint")
    e.add_argument("--seed", type=int, default=0, help="inference seed for checkpoint mode")
    e.add_argument("--iou", default="0.1,0.25,0.5", help="comma-separated AP IoU thresholds")
    e.add_argument("--froc-iou", type=float, default=0.1, help="IoU for the FROC TP rule")
    e.add_argument("--out", help="directory for eval.json and curve data")

    p = sub.add_parser("report", help="emit plots and data files from a run log")
    p.add_argument("log", help="round_log.jsonl or a run directory")
    p.add_argument("--out", required=True, help="directory for plots and data files")

    args = parser.parse_args(argv)
    handler = {
        "generate": _cmd_generate,
        "run": _cmd_run,
        "eval": _cmd_eval,
        "report": _cmd_report,
    }[args.command]
    try:
        return handler(args)
    except (ConfigError, FormatError, ResumeMismatchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
