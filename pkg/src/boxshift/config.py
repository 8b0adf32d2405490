"""Experiment configuration: defaults, strict key-value parsing, digests.

A run is fully described by a flat ``key = value`` text file. Unknown keys
are rejected by name, every hyperparameter has a default, and the canonical
serialization of the resolved config is hashed so checkpoints and manifests
can detect drift between a resumed run and the config on disk.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .geometry import BinningConfig, Spacing

__all__ = ["RunConfig", "ConfigError", "parse_config_text", "load_config", "config_digest"]

ARM_NAMES = ("source_only", "top_p", "top_p_anchor", "prior_guided_anchor")

# Arm name -> (selection mode, anchor adaptation on/off).
ARMS = {
    "source_only": ("source_only", False),
    "top_p": ("top_p", False),
    "top_p_anchor": ("top_p", True),
    "fixed_threshold": ("fixed_threshold", False),
    "prior_guided": ("prior_guided", False),
    "prior_guided_anchor": ("prior_guided", True),
}


class ConfigError(ValueError):
    """Bad key, bad value, or unparseable config text."""


@dataclass(frozen=True)
class RunConfig:
    """All knobs for one experiment, with library-wide defaults."""

    seed: int = 0
    rounds: int = 200
    lambda_start: float = 0.1
    lambda_end: float = 0.8
    alpha_mu: float = 0.9
    alpha_h: float = 0.9
    beta: float = 0.9
    tau: float = 0.5
    nms_iou: float = 0.25
    k_anchors: int = 3
    top_p: float = 0.5
    bin_edges: tuple[float, ...] = BinningConfig().edges
    spacing: tuple[float, float, float] = (4.0, 4.0, 5.0)
    field: tuple[int, int, int] = (96, 96, 96)
    arms: tuple[str, ...] = ARM_NAMES

    # Cohorts.
    source_preset: str = "fdg_like"
    target_preset: str = "psma_like"
    n_source: int = 50
    n_target: int = 50
    train_fraction: float = 0.7
    val_fraction: float = 0.1
    source_cohort_file: str = ""
    target_cohort_file: str = ""

    # Detector oracle.
    train_rate: float = 0.1
    pretrain_rate: float = 0.25
    pretrain_iters: int = 20
    rho_init: float = 0.1
    fp_rate: float = 3.0
    fp_floor: float = 0.25
    jitter: float = 0.15
    coverage_mix: float = 0.3

    # Evaluation.
    eval_ious: tuple[float, ...] = (0.1, 0.25, 0.5)
    froc_iou: float = 0.1
    froc_budgets: tuple[float, ...] = (0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0)
    eval_replicates: int = 3

    def __post_init__(self):
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative")
        if self.rounds < 1:
            raise ConfigError("rounds must be at least 1")
        if not 0.0 < self.lambda_start <= self.lambda_end <= 1.0:
            raise ConfigError(
                f"need 0 < lambda_start <= lambda_end <= 1, got "
                f"{self.lambda_start}..{self.lambda_end}"
            )
        for name in ("alpha_mu", "alpha_h", "beta"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1), got {v}")
        if not 0.0 < self.top_p <= 1.0:
            raise ConfigError(f"top_p must lie in (0, 1], got {self.top_p}")
        if self.k_anchors < 1:
            raise ConfigError("k_anchors must be at least 1")
        unknown = [a for a in self.arms if a not in ARMS]
        if unknown:
            raise ConfigError(f"unknown arms: {unknown}; valid arms are {sorted(ARMS)}")
        if len(set(self.arms)) != len(self.arms):
            raise ConfigError("arms must be distinct")
        if not self.arms:
            raise ConfigError("need at least one arm")
        if self.train_fraction <= 0 or self.val_fraction < 0:
            raise ConfigError("split fractions must be positive")
        if self.train_fraction + self.val_fraction >= 1.0:
            raise ConfigError("train_fraction + val_fraction must leave room for a test split")

    @property
    def binning(self) -> BinningConfig:
        return BinningConfig(edges=self.bin_edges)

    @property
    def spacing_obj(self) -> Spacing:
        return Spacing(*self.spacing)


_INT_KEYS = {"seed", "rounds", "k_anchors", "n_source", "n_target", "pretrain_iters", "eval_replicates"}
_FLOAT_KEYS = {
    "lambda_start", "lambda_end", "alpha_mu", "alpha_h", "beta", "tau", "nms_iou",
    "top_p", "train_fraction", "val_fraction", "train_rate", "pretrain_rate",
    "rho_init", "fp_rate", "fp_floor", "jitter", "coverage_mix", "froc_iou",
}
_STR_KEYS = {"source_preset", "target_preset", "source_cohort_file", "target_cohort_file"}
_FLOAT_TUPLE_KEYS = {"bin_edges", "spacing", "eval_ious", "froc_budgets"}
_INT_TUPLE_KEYS = {"field"}
_STR_TUPLE_KEYS = {"arms"}

_ALL_KEYS = (
    _INT_KEYS | _FLOAT_KEYS | _STR_KEYS | _FLOAT_TUPLE_KEYS | _INT_TUPLE_KEYS | _STR_TUPLE_KEYS
)
assert _ALL_KEYS == {f.name for f in fields(RunConfig)}


def _parse_value(key: str, raw: str):
    try:
        if key in _INT_KEYS:
            return int(raw)
        if key in _FLOAT_KEYS:
            return float(raw)
        if key in _STR_KEYS:
            return raw
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        if key in _FLOAT_TUPLE_KEYS:
            return tuple(float(p) for p in parts)
        if key in _INT_TUPLE_KEYS:
            return tuple(int(p) for p in parts)
        return tuple(parts)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r} ({exc})") from None


def parse_config_text(text: str, **overrides) -> RunConfig:
    """Parse ``key = value`` lines ('#' comments allowed) into a RunConfig.

    Any key not defined on RunConfig is an error naming that key.
    """
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in _ALL_KEYS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate config key {key!r}")
        values[key] = _parse_value(key, raw)
    values.update(overrides)
    try:
        return RunConfig(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path, **overrides) -> RunConfig:
    return parse_config_text(Path(path).read_text(), **overrides)


def serialize_config(cfg: RunConfig) -> str:
    """Canonical key-sorted text form; parsing it back reproduces the config."""
    lines = []
    for f in sorted(fields(RunConfig), key=lambda f: f.name):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def config_digest(cfg: RunConfig) -> str:
    return hashlib.sha256(serialize_config(cfg).encode()).hexdigest()


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    return replace(cfg, seed=seed)


# ---------------------------------------------------------------------------
# Cohort spec files (for the generate command).

_COHORT_INT_KEYS = {"n_subjects", "seed"}
_COHORT_FLOAT_KEYS = {"mean_lesions", "dispersion", "aspect_limit", "max_volume_cc"}
_COHORT_STR_KEYS = {"preset", "name", "domain"}
_COHORT_FLOAT_TUPLE_KEYS = {"size_hist", "spacing", "bin_edges"}
_COHORT_INT_TUPLE_KEYS = {"field"}
_COHORT_KEYS = (
    _COHORT_INT_KEYS
    | _COHORT_FLOAT_KEYS
    | _COHORT_STR_KEYS
    | _COHORT_FLOAT_TUPLE_KEYS
    | _COHORT_INT_TUPLE_KEYS
)


def parse_cohort_spec_text(text: str, seed: int | None = None):
    """Parse a cohort spec file into a CohortSpec.

    Either names a preset (``preset = fdg_like`` or ``psma_like``) with
    optional field overrides, or spells out the cohort fields directly.
    Unknown keys are rejected by name.
    """
    from .geometry import Spacing
    from .simulate import CohortSpec, fdg_like, psma_like

    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in _COHORT_KEYS:
            raise ConfigError(f"line {lineno}: unknown cohort spec key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate cohort spec key {key!r}")
        try:
            if key in _COHORT_INT_KEYS:
                values[key] = int(raw)
            elif key in _COHORT_FLOAT_KEYS:
                values[key] = float(raw)
            elif key in _COHORT_STR_KEYS:
                values[key] = raw
            else:
                parts = [p.strip() for p in raw.split(",") if p.strip()]
                if key in _COHORT_FLOAT_TUPLE_KEYS:
                    values[key] = tuple(float(p) for p in parts)
                else:
                    values[key] = tuple(int(p) for p in parts)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {raw!r} ({exc})") from None
    if seed is not None:
        values["seed"] = seed
    if "spacing" in values:
        values["spacing"] = Spacing(*values["spacing"])
    if "bin_edges" in values:
        values["binning"] = BinningConfig(edges=values.pop("bin_edges"))
    preset = values.pop("preset", None)
    try:
        if preset is not None:
            factory = {"fdg_like": fdg_like, "psma_like": psma_like}.get(preset)
            if factory is None:
                raise ConfigError(f"unknown preset {preset!r} (use fdg_like or psma_like)")
            n = values.pop("n_subjects", 50)
            spec_seed = values.pop("seed", 0)
            domain = values.pop("domain", None)
            base = factory(n, seed=spec_seed, **({"domain": domain} if domain else {}))
            return replace(base, **values) if values else base
        missing = {"n_subjects", "mean_lesions", "size_hist"} - set(values)
        if missing:
            raise ConfigError(f"cohort spec missing required keys: {sorted(missing)}")
        values.setdefault("name", "custom")
        values.setdefault("domain", "target")
        values.setdefault("seed", 0)
        return CohortSpec(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
