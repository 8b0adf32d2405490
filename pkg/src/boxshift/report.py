"""Plot and data-file emission from run artifacts.

Every plot is generated from plain-text data files that are written first, so
any figure can be reproduced (byte-identically: fixed SVG hash salt, no
timestamps) from the emitted numbers alone.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

__all__ = ["emit_report"]

_SVG_OPTS = {"format": "svg", "metadata": {"Date": None}}


def _style():
    matplotlib.rcParams["svg.hashsalt"] = "boxshift"
    matplotlib.rcParams["figure.figsize"] = (6.0, 4.0)


def _write_columns(path: Path, header: str, rows) -> None:
    lines = [f"# {header}"]
    for row in rows:
        lines.append(" ".join(repr(float(v)) for v in row))
    path.write_text("\n".join(lines) + "\n")


def _read_columns(path: Path) -> list[list[float]]:
    rows = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        rows.append([float(v) for v in line.split()])
    return rows


def _plot_series(data_files: dict[str, Path], out: Path, xlabel: str, ylabel: str, title: str) -> None:
    _style()
    fig, ax = plt.subplots()
    for label, path in sorted(data_files.items()):
        rows = _read_columns(path)
        if not rows:
            continue
        xs = [r[0] for r in rows]
        ys = [r[1] for r in rows]
        ax.plot(xs, ys, label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out, **_SVG_OPTS)
    plt.close(fig)


def _plot_hist_trajectory(data_file: Path, out: Path, title: str) -> None:
    _style()
    rows = _read_columns(data_file)
    fig, ax = plt.subplots()
    if rows:
        n_bins = len(rows[0]) - 1
        xs = [r[0] for r in rows]
        for b in range(n_bins):
            ax.plot(xs, [r[1 + b] for r in rows], label=f"bin {b + 1}", linewidth=0.9)
    ax.set_xlabel("round")
    ax.set_ylabel("size-prior mass")
    ax.set_title(title)
    ax.legend(fontsize=6, ncol=2)
    fig.tight_layout()
    fig.savefig(out, **_SVG_OPTS)
    plt.close(fig)


def emit_report(records_by_arm: dict[str, list], test_eval: dict[str, dict], out_dir: str | Path) -> list[str]:
    """Write two-column data files plus SVG plots; returns written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not any(records_by_arm.values()):
        raise ValueError("round log holds no round records")
    written: list[str] = []

    def track(path: Path) -> Path:
        written.append(str(path))
        return path

    ap_files: dict[str, Path] = {}
    mu_files: dict[str, Path] = {}
    for arm, records in records_by_arm.items():
        if not records:
            continue
        ap_files[arm] = track(out_dir / f"ap01_vs_round_{arm}.dat")
        _write_columns(
            ap_files[arm],
            "round ap@0.1 (validation split)",
            [(r.round, r.aps.get("0.1", 0.0)) for r in records],
        )
        mu_files[arm] = track(out_dir / f"mu_vs_round_{arm}.dat")
        _write_columns(mu_files[arm], "round mu", [(r.round, r.mu) for r in records])
        hist_file = track(out_dir / f"hist_vs_round_{arm}.dat")
        _write_columns(
            hist_file,
            "round h_1..h_B",
            [(r.round, *r.hist) for r in records],
        )
        _plot_hist_trajectory(hist_file, track(out_dir / f"hist_vs_round_{arm}.svg"),
                              f"size prior per round ({arm})")

    _plot_series(ap_files, track(out_dir / "ap01_vs_round.svg"), "round", "AP@0.1",
                 "validation AP@0.1 per round")
    _plot_series(mu_files, track(out_dir / "mu_vs_round.svg"), "round", "mean lesions/subject",
                 "count prior per round")

    froc_files: dict[str, Path] = {}
    pr_files: dict[str, Path] = {}
    for arm, blob in test_eval.items():
        froc_files[arm] = track(out_dir / f"froc_{arm}.dat")
        _write_columns(
            froc_files[arm],
            "fp_per_scan sensitivity (cutoff-ordered)",
            [(p[1], p[2]) for p in blob.get("froc_points", [])],
        )
        pr_files[arm] = track(out_dir / f"pr_{arm}.dat")
        _write_columns(
            pr_files[arm],
            "recall precision (cutoff-ordered)",
            [(p[1], p[2]) for p in blob.get("pr_points", [])],
        )
    if froc_files:
        _plot_series(froc_files, track(out_dir / "froc.svg"), "false positives per scan",
                     "sensitivity", "test-split FROC")
    if pr_files:
        _plot_series(pr_files, track(out_dir / "pr.svg"), "recall", "precision",
                     "test-split precision-recall")
    return written
