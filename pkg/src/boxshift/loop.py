"""Alternating-optimization driver for self-training under label shift.

Each round runs two steps per experiment arm. Step 1 is a supervised epoch on
the labeled source cohort. Step 2 (skipped by the source-only arm) is a full
inference pass over the unlabeled target training split, candidate cleaning,
pseudo-label selection under the arm's policy, prior and anchor refreshes,
and a training step on the selected pseudo labels. The selection fraction
ramps linearly across rounds, so early rounds admit only the most trusted
detections and later rounds approach the estimated per-subject prevalence.

Budgets and quotas for round r are computed from the priors produced at round
r-1 (strictly causal; enforced via the round stamps on the prior and anchor
states). Both priors are refreshed from the cleaned candidate sets, which
estimate the target cohort's prevalence and size composition; the budget and
bin quotas then decide how much of that estimate is admitted as labels.

Arms share one pretrained detector, one cohort, and one split; their random
streams are derived per (seed, arm, purpose, round, subject), so arms never
perturb each other and a resumed run reproduces an uninterrupted one bit for
bit.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .anchors import AnchorSet, coverage_many, ema_update_anchors, kmeans_shapes
from .config import ARMS, RunConfig, config_digest
from .fileio import (
    append_jsonl,
    read_cohort,
    read_jsonl,
    read_versioned_json,
    state_from_dict,
    state_to_dict,
    write_cohort,
    write_json_atomic,
)
from .geometry import BinningConfig, Spacing, bins_of_volumes, boxes_to_array, volumes_cc
from .matching import Detection, average_precision, froc, pr_curve, sensitivity_at
from .priors import (
    PriorState,
    Quota,
    allocate_quota,
    budget,
    histogram_of_boxes,
    update_hist,
    update_mu,
)
from .seeding import seed_for
from .selection import (
    MODE_FIXED_THRESHOLD,
    MODE_PRIOR_GUIDED,
    MODE_TOP_P,
    PseudoLabelSet,
    candidate_set,
    select_fixed_threshold,
    select_prior_guided,
    select_top_p,
)
from .simulate import (
    CohortSpec,
    SimDetector,
    Subject,
    fdg_like,
    generate_cohort,
    infer,
    new_detector,
    psma_like,
    source_pretrain,
    train_update,
)

__all__ = [
    "RoundRecord",
    "ArmState",
    "ExperimentData",
    "ExperimentResult",
    "ResumeMismatchError",
    "lambda_at",
    "prepare_data",
    "initial_state",
    "run_round",
    "run_experiment",
    "evaluate_subjects",
]

CHECKPOINT_FORMAT = "checkpoint"
ROUNDLOG_FORMAT = "roundlog"
TESTEVAL_FORMAT = "testeval"


class ResumeMismatchError(RuntimeError):
    """Checkpoint on disk was produced by a different configuration."""


def lambda_at(r: int, cfg: RunConfig) -> float:
    """Selection fraction at round r: linear ramp, exact at both endpoints."""
    if not 1 <= r <= cfg.rounds:
        raise ValueError(f"round {r} outside 1..{cfg.rounds}")
    if r == 1 or cfg.rounds == 1:
        return cfg.lambda_start
    if r == cfg.rounds:
        return cfg.lambda_end
    return cfg.lambda_start + (cfg.lambda_end - cfg.lambda_start) * (r - 1) / (cfg.rounds - 1)


@dataclass(frozen=True)
class RoundRecord:
    """Append-only observability record, one per (arm, round)."""

    arm: str
    round: int
    lam: float
    mu: float
    hist: tuple[float, ...]
    anchor_shapes: tuple[tuple[float, float, float], ...]
    anchor_round: int
    n_candidates: int
    budget: int
    selected_per_bin: tuple[int, ...]
    aps: dict[str, float]
    froc_sens: dict[str, float]

    @property
    def n_selected(self) -> int:
        return sum(self.selected_per_bin)

    def to_json(self) -> dict:
        return {
            "arm": self.arm,
            "round": self.round,
            "lam": self.lam,
            "mu": self.mu,
            "hist": list(self.hist),
            "anchor_shapes": [list(s) for s in self.anchor_shapes],
            "anchor_round": self.anchor_round,
            "n_candidates": self.n_candidates,
            "budget": self.budget,
            "selected_per_bin": list(self.selected_per_bin),
            "aps": self.aps,
            "froc_sens": self.froc_sens,
        }

    @classmethod
    def from_json(cls, d: dict) -> "RoundRecord":
        return cls(
            arm=d["arm"],
            round=d["round"],
            lam=d["lam"],
            mu=d["mu"],
            hist=tuple(d["hist"]),
            anchor_shapes=tuple(tuple(s) for s in d["anchor_shapes"]),
            anchor_round=d["anchor_round"],
            n_candidates=d["n_candidates"],
            budget=d["budget"],
            selected_per_bin=tuple(d["selected_per_bin"]),
            aps=dict(d["aps"]),
            froc_sens=dict(d["froc_sens"]),
        )


@dataclass(frozen=True)
class ArmState:
    """Everything one arm carries between rounds."""

    detector: SimDetector
    priors: PriorState
    anchors: AnchorSet


@dataclass(frozen=True)
class ExperimentData:
    """Cohorts and the three-way target split shared by all arms."""

    source: tuple[Subject, ...]
    target_train: tuple[Subject, ...]
    target_val: tuple[Subject, ...]
    target_test: tuple[Subject, ...]
    binning: BinningConfig
    spacing: Spacing

    @property
    def target_all(self) -> tuple[Subject, ...]:
        return self.target_train + self.target_val + self.target_test


@dataclass
class ExperimentResult:
    config: RunConfig
    digest: str
    data: ExperimentData
    initial_anchors: AnchorSet
    records: dict[str, list[RoundRecord]]
    final_states: dict[str, ArmState]
    test_eval: dict[str, dict]
    completed: bool


def _cohort_spec(preset: str, n: int, seed: int, domain: str, cfg: RunConfig) -> CohortSpec:
    common = dict(
        field=cfg.field,
        spacing=cfg.spacing_obj,
        binning=cfg.binning,
    )
    if preset == "fdg_like":
        return fdg_like(n, seed=seed, domain=domain, **common)
    if preset == "psma_like":
        return psma_like(n, seed=seed, domain=domain, **common)
    raise ValueError(f"unknown cohort preset {preset!r}")


def prepare_data(cfg: RunConfig) -> ExperimentData:
    """Generate (or load) cohorts and split the target 70/10/20 by default."""
    if cfg.source_cohort_file:
        source, _ = read_cohort(cfg.source_cohort_file)
    else:
        seed = int(seed_for(cfg.seed, "source-cohort").generate_state(1)[0])
        source = generate_cohort(_cohort_spec(cfg.source_preset, cfg.n_source, seed, "source", cfg))
    if cfg.target_cohort_file:
        target, _ = read_cohort(cfg.target_cohort_file)
    else:
        seed = int(seed_for(cfg.seed, "target-cohort").generate_state(1)[0])
        target = generate_cohort(_cohort_spec(cfg.target_preset, cfg.n_target, seed, "target", cfg))

    rng = np.random.default_rng(seed_for(cfg.seed, "split"))
    order = rng.permutation(len(target))
    n_train = int(cfg.train_fraction * len(target))
    n_val = int(cfg.val_fraction * len(target))
    train = tuple(target[i] for i in order[:n_train])
    val = tuple(target[i] for i in order[n_train : n_train + n_val])
    test = tuple(target[i] for i in order[n_train + n_val :])
    if not train or not test:
        raise ValueError("target cohort too small for the requested split")
    return ExperimentData(
        source=tuple(source),
        target_train=train,
        target_val=val,
        target_test=test,
        binning=cfg.binning,
        spacing=cfg.spacing_obj,
    )


def initial_state(cfg: RunConfig, data: ExperimentData) -> ArmState:
    """Shared starting point: source-fit anchors, source priors, pretrained detector."""
    source_boxes = [b for s in data.source for b in s.gt_boxes]
    anchors = AnchorSet(
        shapes=tuple(
            kmeans_shapes(source_boxes, cfg.k_anchors, seed=seed_for(cfg.seed, "anchors-init"))
        ),
        round=0,
    )
    detector = new_detector(
        data.binning,
        rho_init=cfg.rho_init,
        fp_rate=cfg.fp_rate,
        fp_floor=cfg.fp_floor,
        jitter=cfg.jitter,
        coverage_mix=cfg.coverage_mix,
    )
    detector = source_pretrain(
        detector,
        data.source,
        anchors,
        data.binning,
        data.spacing,
        rate=cfg.pretrain_rate,
        max_iters=cfg.pretrain_iters,
    )
    priors = PriorState(
        mu=float(np.mean([len(s.gt_boxes) for s in data.source])),
        hist=histogram_of_boxes(source_boxes, data.binning, data.spacing),
        round=0,
    )
    return ArmState(detector=detector, priors=priors, anchors=anchors)


def evaluate_subjects(
    detector: SimDetector,
    anchors: AnchorSet,
    subjects: Sequence[Subject],
    cfg: RunConfig,
    binning: BinningConfig,
    spacing: Spacing,
    *seed_parts,
    replicates: int = 1,
) -> dict:
    """Run inference over subjects and compute AP per IoU plus a FROC curve.

    With ``replicates`` > 1 each subject is scanned that many times with
    independent noise and the detections are pooled (per-scan FP rates stay
    calibrated because every replicate counts as a scan), which tightens the
    metric estimates on small splits.
    """
    dets = {}
    gts = {}
    for rep in range(replicates):
        for i, s in enumerate(subjects):
            key = s.id if rep == 0 else f"{s.id}#r{rep}"
            dets[key] = infer(
                detector, s, anchors, binning, spacing, seed_for(*seed_parts, rep, i)
            )
            gts[key] = list(s.gt_boxes)
    aps = {str(t): average_precision(dets, gts, t) for t in cfg.eval_ious}
    curve = froc(dets, gts, cfg.froc_iou)
    sens = {str(b): sensitivity_at(curve, b) for b in cfg.froc_budgets}
    return {
        "aps": aps,
        "froc_points": [list(p) for p in zip(curve.cutoffs, curve.fp_per_scan, curve.sensitivity)],
        "sens_at": sens,
        "pr_points": [list(p) for p in pr_curve(dets, gts, cfg.eval_ious[0])],
    }


def _select(
    mode: str,
    cands: Mapping[str, list[Detection]],
    quota: Quota,
    cfg: RunConfig,
    binning: BinningConfig,
    spacing: Spacing,
    r: int,
) -> PseudoLabelSet:
    if mode == MODE_PRIOR_GUIDED:
        return select_prior_guided(cands, quota, binning, spacing, round=r)
    if mode == MODE_TOP_P:
        return select_top_p(cands, cfg.top_p, round=r)
    if mode == MODE_FIXED_THRESHOLD:
        return select_fixed_threshold(cands, round=r)
    raise ValueError(f"unknown selection mode {mode!r}")


def run_round(
    arm: str,
    state: ArmState,
    data: ExperimentData,
    cfg: RunConfig,
    r: int,
) -> tuple[ArmState, RoundRecord]:
    """Execute one round for one arm and emit its observability record."""
    mode, adapt_anchors = ARMS[arm]
    binning, spacing = data.binning, data.spacing
    n_bins = binning.n_bins
    if state.anchors.round > r - 1:
        raise RuntimeError(f"{arm} round {r}: anchor state from round {state.anchors.round}")
    if mode != "source_only" and state.priors.round != r - 1:
        raise RuntimeError(f"{arm} round {r}: prior state from round {state.priors.round}")
    lam = lambda_at(r, cfg)

    # Step 1: supervised epoch on the labeled source cohort.
    source_labels = PseudoLabelSet(
        {s.id: s.gt_boxes for s in data.source}, round=r, mode="supervised"
    )
    source_by_id = {s.id: s for s in data.source}
    detector = train_update(
        state.detector,
        source_labels,
        source_by_id,
        state.anchors,
        binning,
        spacing,
        rate=cfg.train_rate,
        target_feedback=False,
    )
    priors = state.priors
    anchors = state.anchors
    n_candidates = 0
    n_allow = 0
    selected_per_bin = (0,) * n_bins

    if mode != "source_only":
        # Step 2: infer on the target training split and self-train.
        cands: dict[str, list[Detection]] = {}
        for i, subject in enumerate(data.target_train):
            raw = infer(
                detector,
                subject,
                anchors,
                binning,
                spacing,
                seed_for(cfg.seed, arm, "infer", r, i),
            )
            cands[subject.id] = candidate_set(raw, cfg.tau, cfg.nms_iou)
        cand_counts = [len(cands[s.id]) for s in data.target_train]
        n_candidates = int(sum(cand_counts))

        n_allow = budget(priors.mu, lam)
        quota = allocate_quota(priors.hist, n_allow) if n_allow > 0 else Quota((0,) * n_bins)
        pseudo = _select(mode, cands, quota, cfg, binning, spacing, r)

        selected_boxes = pseudo.all_boxes()
        counts = np.zeros(n_bins, dtype=int)
        if selected_boxes:
            bins = bins_of_volumes(volumes_cc(boxes_to_array(selected_boxes), spacing), binning)
            counts = np.bincount(bins - 1, minlength=n_bins)
        selected_per_bin = tuple(int(v) for v in counts)

        # Both priors are refreshed from the cleaned candidates: they estimate
        # what the target cohort looks like, while the budget and quota cap
        # what gets admitted. Feeding them from post-quota selections instead
        # would close a feedback loop that contracts mu toward zero (the
        # budget caps selections at a fraction of mu) and strands histogram
        # mass (a bin with no slots can never reappear in the selected
        # histogram), freezing adaptation under fast moving averages.
        candidate_boxes = [d.box for c in cands.values() for d in c]
        new_mu = update_mu(priors, cand_counts, cfg.alpha_mu)
        new_hist = update_hist(priors, candidate_boxes, binning, spacing, cfg.alpha_h)
        priors = PriorState(mu=new_mu, hist=new_hist, round=r)

        if adapt_anchors and len(selected_boxes) >= cfg.k_anchors:
            centroids = kmeans_shapes(
                selected_boxes, cfg.k_anchors, seed=seed_for(cfg.seed, arm, "kmeans", r)
            )
            anchors = replace(
                ema_update_anchors(anchors, centroids, cfg.beta), round=r
            )

        if pseudo.n_boxes > 0:
            target_by_id = {s.id: s for s in data.target_train}
            detector = train_update(
                detector,
                pseudo,
                target_by_id,
                anchors,
                binning,
                spacing,
                rate=cfg.train_rate,
                target_feedback=True,
            )

    snapshot = evaluate_subjects(
        detector, anchors, data.target_val, cfg, binning, spacing, cfg.seed, arm, "eval-val", r
    )
    record = RoundRecord(
        arm=arm,
        round=r,
        lam=lam,
        mu=priors.mu,
        hist=priors.hist,
        anchor_shapes=anchors.shapes,
        anchor_round=anchors.round,
        n_candidates=n_candidates,
        budget=n_allow,
        selected_per_bin=selected_per_bin,
        aps=snapshot["aps"],
        froc_sens={k: snapshot["sens_at"][k] for k in ("1.0", "2.0", "4.0") if k in snapshot["sens_at"]},
    )
    return ArmState(detector=detector, priors=priors, anchors=anchors), record


# ---------------------------------------------------------------------------
# Whole-experiment driver with checkpoint/resume.


def _checkpoint_payload(cfg: RunConfig, states: dict[str, ArmState], done: dict[str, int]) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "config_digest": config_digest(cfg),
        "arms": {
            arm: {"completed_rounds": done[arm], **state_to_dict(s.detector, s.priors, s.anchors)}
            for arm, s in states.items()
        },
    }


def _load_checkpoint(path: Path, cfg: RunConfig) -> tuple[dict[str, ArmState], dict[str, int]]:
    payload = read_versioned_json(path, CHECKPOINT_FORMAT)
    if payload["config_digest"] != config_digest(cfg):
        raise ResumeMismatchError(
            f"{path}: checkpoint was written by a different config "
            f"(digest {payload['config_digest'][:12]}.. != {config_digest(cfg)[:12]}..)"
        )
    states: dict[str, ArmState] = {}
    done: dict[str, int] = {}
    for arm, blob in payload["arms"].items():
        detector, priors, anchors = state_from_dict(blob)
        states[arm] = ArmState(detector=detector, priors=priors, anchors=anchors)
        done[arm] = int(blob["completed_rounds"])
    return states, done


def run_experiment(
    cfg: RunConfig,
    out_dir: str | Path | None = None,
    stop_after_rounds: int | None = None,
) -> ExperimentResult:
    """Run every configured arm for R rounds; optionally checkpoint to disk.

    With ``out_dir`` set, a round log (JSON lines) and a checkpoint are
    maintained; rerunning with the same config resumes from the checkpoint
    and produces a log byte-identical to an uninterrupted run. A checkpoint
    written under a different config is refused. ``stop_after_rounds`` stops
    after that many total (arm, round) steps have been completed, counting
    steps restored from the checkpoint.
    """
    digest = config_digest(cfg)
    data = prepare_data(cfg)
    shared = initial_state(cfg, data)

    states = {arm: shared for arm in cfg.arms}
    done = {arm: 0 for arm in cfg.arms}
    records: dict[str, list[RoundRecord]] = {arm: [] for arm in cfg.arms}

    log_path = ckpt_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "round_log.jsonl"
        ckpt_path = out_dir / "checkpoint.json"
        if ckpt_path.exists():
            states, done = _load_checkpoint(ckpt_path, cfg)
            for arm in cfg.arms:
                states.setdefault(arm, shared)
                done.setdefault(arm, 0)
            if log_path.exists():
                for line in read_jsonl(log_path):
                    if line.get("kind") == "round":
                        rec = RoundRecord.from_json(line["record"])
                        if rec.round <= done.get(rec.arm, 0):
                            records[rec.arm].append(rec)
        else:
            with open(log_path, "w") as fh:
                fh.write("")
            append_jsonl(
                log_path,
                {"kind": "header", "format": ROUNDLOG_FORMAT, "version": 1, "config_digest": digest},
            )

    total_done = sum(done.values())
    stopped = False
    for arm in cfg.arms:
        if stopped:
            break
        for r in range(done[arm] + 1, cfg.rounds + 1):
            if stop_after_rounds is not None and total_done >= stop_after_rounds:
                stopped = True
                break
            states[arm], record = run_round(arm, states[arm], data, cfg, r)
            records[arm].append(record)
            done[arm] = r
            total_done += 1
            if log_path is not None:
                append_jsonl(log_path, {"kind": "round", "record": record.to_json()})
                write_json_atomic(ckpt_path, _checkpoint_payload(cfg, states, done))

    completed = all(done[arm] == cfg.rounds for arm in cfg.arms)
    test_eval: dict[str, dict] = {}
    if completed:
        for arm in cfg.arms:
            s = states[arm]
            test_eval[arm] = evaluate_subjects(
                s.detector, s.anchors, data.target_test, cfg,
                data.binning, data.spacing, cfg.seed, arm, "eval-test", 0,
                replicates=cfg.eval_replicates,
            )
        if out_dir is not None:
            write_json_atomic(
                Path(out_dir) / "test_eval.json",
                {"format": TESTEVAL_FORMAT, "version": 1, "config_digest": digest, "arms": test_eval},
            )
    return ExperimentResult(
        config=cfg,
        digest=digest,
        data=data,
        initial_anchors=shared.anchors,
        records=records,
        final_states=states,
        test_eval=test_eval,
        completed=completed,
    )


def write_cohort_files(cfg: RunConfig, data: ExperimentData, out_dir: str | Path) -> dict[str, str]:
    """Persist the cohorts an experiment ran on; returns name -> path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, subjects in (("source", data.source), ("target", data.target_all)):
        p = out_dir / f"cohort_{name}.txt"
        write_cohort(p, list(subjects), data.spacing)
        paths[name] = str(p)
    return paths
