"""Versioned on-disk formats: cohorts, detections, run state, logs.

Text formats are line-oriented and human-readable; the first line of every
file names the format and its major version, and readers reject versions
they do not know. Floats are written with ``repr`` so round-trips are exact
and byte-identical across runs.

Cohort file::

    cohort 1
    spacing 4.0 4.0 5.0
    field 96 96 96
    subject target-0000 target 2
    box <min_x> <min_y> <min_z> <w> <h> <d>
    ...

Detections file::

    detections 1
    subject target-0000 3
    det <min_x> <min_y> <min_z> <w> <h> <d> <confidence>
    ...

Checkpoints, manifests, and test evaluations are JSON objects with a
``format``/``version`` pair; round logs are JSON lines with a header line.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .anchors import AnchorSet
from .geometry import MIN_LESION_CC, Box3, Spacing, volume_cc
from .matching import Detection
from .priors import PriorState
from .simulate import SimDetector, Subject

__all__ = [
    "FormatError",
    "write_cohort",
    "read_cohort",
    "write_detections",
    "read_detections",
    "state_to_dict",
    "state_from_dict",
    "write_json_atomic",
    "read_versioned_json",
    "append_jsonl",
    "read_jsonl",
]

COHORT_FORMAT = "cohort"
DETECTIONS_FORMAT = "detections"
FORMAT_VERSION = 1


class FormatError(ValueError):
    """Unparseable file, wrong format name, or unsupported major version."""


def _fmt_floats(values: Iterable[float]) -> str:
    return " ".join(repr(float(v)) for v in values)


def _check_header(line: str, expected: str, path) -> None:
    parts = line.split()
    if len(parts) != 2 or parts[0] != expected:
        raise FormatError(f"{path}: expected '{expected} <version>' header, got {line!r}")
    try:
        version = int(parts[1])
    except ValueError:
        raise FormatError(f"{path}: bad version in header {line!r}") from None
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported {expected} version {version}")


def write_cohort(path: str | Path, subjects: Sequence[Subject], spacing: Spacing) -> None:
    fields = {s.field for s in subjects}
    if len(fields) > 1:
        raise ValueError(f"subjects disagree on field bounds: {sorted(fields)}")
    field = subjects[0].field if subjects else (0, 0, 0)
    lines = [f"{COHORT_FORMAT} {FORMAT_VERSION}"]
    lines.append(f"spacing {_fmt_floats((spacing.dx, spacing.dy, spacing.dz))}")
    lines.append(f"field {field[0]} {field[1]} {field[2]}")
    for s in subjects:
        lines.append(f"subject {s.id} {s.domain} {len(s.gt_boxes)}")
        for b in s.gt_boxes:
            lines.append(f"box {_fmt_floats((*b.min_corner, *b.size))}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_cohort(path: str | Path) -> tuple[list[Subject], Spacing]:
    """Load subjects and the cohort spacing; enforces the lesion-volume floor."""
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise FormatError(f"{path}: empty file")
    _check_header(lines[0], COHORT_FORMAT, path)
    spacing = None
    field = None
    subjects: list[Subject] = []
    current_id = current_domain = None
    boxes: list[Box3] = []
    expected = 0

    def flush():
        nonlocal current_id
        if current_id is not None:
            if len(boxes) != expected:
                raise FormatError(
                    f"{path}: subject {current_id} declares {expected} boxes, found {len(boxes)}"
                )
            subjects.append(Subject(current_id, current_domain, tuple(boxes), field))
            current_id = None

    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if not parts:
            continue
        kind = parts[0]
        try:
            if kind == "spacing":
                spacing = Spacing(*(float(v) for v in parts[1:4]))
            elif kind == "field":
                field = tuple(int(v) for v in parts[1:4])
            elif kind == "subject":
                flush()
                current_id, current_domain = parts[1], parts[2]
                expected = int(parts[3])
                boxes = []
            elif kind == "box":
                vals = [float(v) for v in parts[1:7]]
                boxes.append(Box3(tuple(vals[:3]), tuple(vals[3:])))
            else:
                raise FormatError(f"{path}:{lineno}: unknown record {kind!r}")
        except (ValueError, IndexError) as exc:
            if isinstance(exc, FormatError):
                raise
            raise FormatError(f"{path}:{lineno}: bad record {line!r} ({exc})") from None
    if spacing is None or field is None:
        raise FormatError(f"{path}: missing spacing or field header")
    flush()
    for s in subjects:
        for b in s.gt_boxes:
            v = volume_cc(b, spacing)
            if v < MIN_LESION_CC - 1e-12:
                raise FormatError(
                    f"{path}: subject {s.id} has a {v:.4f} cc lesion, below the "
                    f"{MIN_LESION_CC} cc floor"
                )
    return subjects, spacing


def write_detections(path: str | Path, dets_by_subject: Mapping[str, Sequence[Detection]]) -> None:
    lines = [f"{DETECTIONS_FORMAT} {FORMAT_VERSION}"]
    for sid, dets in dets_by_subject.items():
        lines.append(f"subject {sid} {len(dets)}")
        for d in dets:
            lines.append(f"det {_fmt_floats((*d.box.min_corner, *d.box.size, d.confidence))}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_detections(path: str | Path) -> dict[str, list[Detection]]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise FormatError(f"{path}: empty file")
    _check_header(lines[0], DETECTIONS_FORMAT, path)
    out: dict[str, list[Detection]] = {}
    current: list[Detection] | None = None
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if not parts:
            continue
        try:
            if parts[0] == "subject":
                current = out.setdefault(parts[1], [])
            elif parts[0] == "det":
                if current is None:
                    raise FormatError(f"{path}:{lineno}: det record before any subject")
                vals = [float(v) for v in parts[1:8]]
                current.append(Detection(Box3(tuple(vals[:3]), tuple(vals[3:6])), vals[6]))
            else:
                raise FormatError(f"{path}:{lineno}: unknown record {parts[0]!r}")
        except (ValueError, IndexError) as exc:
            if isinstance(exc, FormatError):
                raise
            raise FormatError(f"{path}:{lineno}: bad record {line!r} ({exc})") from None
    return out


# ---------------------------------------------------------------------------
# Run-state serialization (checkpoints).


def state_to_dict(detector: SimDetector, priors: PriorState, anchors: AnchorSet) -> dict:
    return {
        "detector": {
            "rho": list(detector.rho),
            "belief_hist": list(detector.belief_hist),
            "fp_rate": detector.fp_rate,
            "jitter": detector.jitter,
            "coverage_mix": detector.coverage_mix,
            "coverage_sat": detector.coverage_sat,
            "conf_tp_base": detector.conf_tp_base,
            "conf_tp_gain": detector.conf_tp_gain,
            "conf_fp_mean": detector.conf_fp_mean,
            "conf_kappa": detector.conf_kappa,
            "fp_floor": detector.fp_floor,
            "source_fp_factor": detector.source_fp_factor,
            "target_skill": detector.target_skill,
        },
        "priors": {"mu": priors.mu, "hist": list(priors.hist), "round": priors.round},
        "anchors": {"shapes": [list(s) for s in anchors.shapes], "round": anchors.round},
    }


def state_from_dict(d: dict) -> tuple[SimDetector, PriorState, AnchorSet]:
    det = d["detector"]
    detector = SimDetector(
        rho=tuple(det["rho"]),
        belief_hist=tuple(det["belief_hist"]),
        fp_rate=det["fp_rate"],
        jitter=det["jitter"],
        coverage_mix=det["coverage_mix"],
        coverage_sat=det["coverage_sat"],
        conf_tp_base=det["conf_tp_base"],
        conf_tp_gain=det["conf_tp_gain"],
        conf_fp_mean=det["conf_fp_mean"],
        conf_kappa=det["conf_kappa"],
        fp_floor=det["fp_floor"],
        source_fp_factor=det["source_fp_factor"],
        target_skill=det["target_skill"],
    )
    priors = PriorState(
        mu=d["priors"]["mu"], hist=tuple(d["priors"]["hist"]), round=d["priors"]["round"]
    )
    anchors = AnchorSet(
        shapes=tuple(tuple(s) for s in d["anchors"]["shapes"]), round=d["anchors"]["round"]
    )
    return detector, priors, anchors


# ---------------------------------------------------------------------------
# JSON helpers.


def write_json_atomic(path: str | Path, payload: dict) -> None:
    """Write via a temp file + rename so partial files never appear."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")
    os.replace(tmp, path)


def read_versioned_json(path: str | Path, expected_format: str) -> dict:
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from None
    if payload.get("format") != expected_format:
        raise FormatError(f"{path}: expected format {expected_format!r}, got {payload.get('format')!r}")
    if payload.get("version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported {expected_format} version {payload.get('version')!r}")
    return payload


def append_jsonl(path: str | Path, record: dict) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def read_jsonl(path: str | Path) -> list[dict]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out
