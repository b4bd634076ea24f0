"""Strict JSON experiment configuration.

Unknown keys anywhere in the document are rejected so that a typo in a sweep definition
fails loudly instead of silently running the defaults.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional

from . import backups as B
from .mdp import GridWorldSpec


class ConfigError(ValueError):
    pass


VARIANTS = {
    "single_step_v": (B.SingleStepV, ()),
    "chunked_v": (B.ChunkedV, ("h",)),
    "cgq_blend_v": (B.CGQBlendV, ("h", "w")),
    "n_step_v": (B.NStepV, ("n",)),
    "single_step_q": (B.SingleStepQ, ()),
    "chunked_q": (B.ChunkedQ, ("h",)),
    "cgq_reg_q": (B.CGQRegQ, ("h", "beta", "tau")),
    "cgq_max_q": (B.CGQMaxQ, ("h",)),
    "cgq_distill_q": (B.CGQDistillQ, ("h", "tau", "beta")),
    "cgq_opposite_q": (B.CGQOppositeQ, ("h", "beta", "tau")),
}


@dataclass(frozen=True)
class ArmConfig:
    label: str
    variant: str
    params: Dict[str, float] = field(default_factory=dict)
    step_size: Optional[float] = None

    def build(self) -> B.Variant:
        cls, allowed = VARIANTS[self.variant]
        try:
            return cls(**self.params)
        except (TypeError, B.BackupConfigError) as exc:
            raise ConfigError(f"arm {self.label!r}: {exc}") from exc

    @property
    def is_q_level(self) -> bool:
        return self.variant.endswith("_q")

    def to_dict(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {"label": self.label, "variant": self.variant, **self.params}
        if self.step_size is not None:
            out["step_size"] = self.step_size
        return out

    @classmethod
    def from_dict(cls, doc: Dict[str, Any]) -> "ArmConfig":
        doc = dict(doc)
        try:
            label, variant = doc.pop("label"), doc.pop("variant")
        except KeyError as exc:
            raise ConfigError(f"arm definition missing {exc}") from exc
        if variant not in VARIANTS:
            raise ConfigError(f"unknown arm variant {variant!r}; expected one of {sorted(VARIANTS)}")
        step_size = doc.pop("step_size", None)
        allowed = VARIANTS[variant][1]
        extra = set(doc) - set(allowed)
        if extra:
            raise ConfigError(f"arm {label!r}: unknown keys {sorted(extra)} for {variant}")
        arm = cls(str(label), variant, dict(doc), step_size)
        arm.build()
        return arm


@dataclass(frozen=True)
class Comparison:
    """Acceptance flag: mean MSE of ``better`` below ``worse`` at step ``k`` by ``n_se`` pooled SEs."""

    better: str
    worse: str
    k: int
    n_se: float = 2.0


@dataclass(frozen=True)
class DatasetConfig:
    n_traj: int = 60
    max_len: int = 15
    eps: float = 0.9
    dataset_seed: int = 0


@dataclass(frozen=True)
class TheoryConfig:
    n: int = 50
    gamma: float = 0.9
    sigma: float = 0.05
    n_instances: int = 50
    n_seeds: int = 100
    k_max: int = 400
    bias_triples: int = 100
    contraction_pairs: int = 1000
    contraction_operators: int = 10
    beta_grid: List[float] = field(default_factory=lambda: [0.0, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 1e6])
    target_dist_sq: float = 0.01
    spectrum: str = "uniform"
    sweep_gamma: Optional[float] = None  # defaults to gamma
    sweep_k_max: Optional[int] = None  # defaults to k_max
    instance_seed: int = 0


@dataclass(frozen=True)
class SweepConfig:
    base_arm: ArmConfig
    grid: Dict[str, List[float]]
    metric_k: List[int] = field(default_factory=lambda: [3, 100])


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str = "gridworld"
    grid: GridWorldSpec = GridWorldSpec()
    dataset: DatasetConfig = DatasetConfig()
    arms: List[ArmConfig] = field(default_factory=list)
    noise_sigma: float = 0.05
    iterations: int = 100
    checkpoints: List[int] = field(default_factory=lambda: [1, 3, 10, 100])
    noise_seeds: int = 20
    seed: int = 0
    reference: str = "dataset"
    comparisons: List[Comparison] = field(default_factory=list)
    output_dir: str = "out"
    theory: TheoryConfig = TheoryConfig()
    sweep: Optional[SweepConfig] = None

    def __post_init__(self):
        if self.experiment not in ("gridworld", "theory", "sweep", "dataset"):
            raise ConfigError(f"unknown experiment {self.experiment!r}")
        if self.reference not in ("dataset", "mdp"):
            raise ConfigError("reference must be 'dataset' or 'mdp'")
        cps = list(self.checkpoints)
        if cps != sorted(cps) or len(set(cps)) != len(cps) or any(k < 1 for k in cps):
            raise ConfigError("checkpoints must be strictly increasing positive integers")
        if cps and cps[-1] > self.iterations:
            raise ConfigError(f"checkpoint {cps[-1]} lies beyond iterations={self.iterations}")
        if self.noise_seeds < 2:
            raise ConfigError("noise_seeds must be >= 2 so that standard errors exist")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")
        labels = [a.label for a in self.arms]
        if len(set(labels)) != len(labels):
            raise ConfigError("arm labels must be unique")
        for c in self.comparisons:
            for lab in (c.better, c.worse):
                if lab not in labels:
                    raise ConfigError(f"comparison refers to unknown arm label {lab!r}")
            if c.k > self.iterations or c.k < 1:
                raise ConfigError(f"comparison step {c.k} outside 1..{self.iterations}")
        if self.experiment == "sweep":
            if self.sweep is None or not self.sweep.grid or any(len(v) == 0 for v in self.sweep.grid.values()):
                raise ConfigError("sweep experiment needs a non-empty sweep grid")

    @property
    def arm_map(self) -> Dict[str, ArmConfig]:
        return {a.label: a for a in self.arms}


# ---------------------------------------------------------------------------
# defaults
# ---------------------------------------------------------------------------

GRIDWORLD_ARMS = [
    {"label": "single-step", "variant": "single_step_v"},
    {"label": "chunked", "variant": "chunked_v", "h": 4},
    {"label": "cgq", "variant": "cgq_blend_v", "h": 4, "w": 0.7},
]

GRIDWORLD_COMPARISONS = [
    {"better": "cgq", "worse": "single-step", "k": 100, "n_se": 2.0},
    {"better": "cgq", "worse": "chunked", "k": 100, "n_se": 2.0},
    {"better": "chunked", "worse": "single-step", "k": 1, "n_se": 2.0},
    {"better": "chunked", "worse": "single-step", "k": 3, "n_se": 2.0},
]

Q_SUITE_ARMS = [
    {"label": "single-step-q", "variant": "single_step_q"},
    {"label": "chunked-q", "variant": "chunked_q", "h": 4},
    {"label": "cgq-reg", "variant": "cgq_reg_q", "h": 4, "beta": 1.0, "tau": 0.95},
    {"label": "cgq-distill", "variant": "cgq_distill_q", "h": 4, "tau": 0.95, "beta": 1.0},
    {"label": "cgq-max", "variant": "cgq_max_q", "h": 4},
    {"label": "cgq-opposite", "variant": "cgq_opposite_q", "h": 4, "beta": 1.0, "tau": 0.95},
]

Q_SUITE_COMPARISONS = [
    {"better": "cgq-reg", "worse": "cgq-distill", "k": 100, "n_se": 1.0},
    {"better": "cgq-reg", "worse": "cgq-opposite", "k": 100, "n_se": 1.0},
]


def default_document(experiment: str = "gridworld") -> Dict[str, Any]:
    doc: Dict[str, Any] = {"experiment": experiment}
    if experiment == "gridworld":
        doc["arms"] = copy.deepcopy(GRIDWORLD_ARMS)
        doc["comparisons"] = copy.deepcopy(GRIDWORLD_COMPARISONS)
    elif experiment == "qsuite":
        doc = {"experiment": "gridworld", "arms": copy.deepcopy(Q_SUITE_ARMS), "comparisons": copy.deepcopy(Q_SUITE_COMPARISONS)}
    elif experiment == "sweep":
        doc["sweep"] = {"base_arm": {"label": "chunked", "variant": "chunked_v", "h": 4}, "grid": {"h": [1, 2, 4, 8]}}
    return doc


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------


def _strict(cls, doc: Dict[str, Any], where: str) -> Dict[str, Any]:
    if not isinstance(doc, dict):
        raise ConfigError(f"{where} must be a JSON object")
    names = {f.name for f in fields(cls)}
    extra = set(doc) - names
    if extra:
        raise ConfigError(f"unknown keys in {where}: {sorted(extra)}")
    return dict(doc)


def _grid_spec(doc: Dict[str, Any]) -> GridWorldSpec:
    d = _strict(GridWorldSpec, doc, "grid")
    if "goal" in d:
        d["goal"] = tuple(d["goal"])
    if "walls" in d:
        d["walls"] = frozenset(tuple(w) for w in d["walls"])
    try:
        return GridWorldSpec(**d)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"grid: {exc}") from exc


def config_from_dict(doc: Dict[str, Any]) -> ExperimentConfig:
    d = _strict(ExperimentConfig, doc, "config")
    if "grid" in d:
        d["grid"] = _grid_spec(d["grid"])
    if "dataset" in d:
        d["dataset"] = DatasetConfig(**_strict(DatasetConfig, d["dataset"], "dataset"))
    if "arms" in d:
        d["arms"] = [ArmConfig.from_dict(a) for a in d["arms"]]
    if "comparisons" in d:
        d["comparisons"] = [Comparison(**_strict(Comparison, c, "comparison")) for c in d["comparisons"]]
    if "theory" in d:
        d["theory"] = TheoryConfig(**_strict(TheoryConfig, d["theory"], "theory"))
    if "sweep" in d and d["sweep"] is not None:
        s = _strict(SweepConfig, d["sweep"], "sweep")
        if "base_arm" not in s or "grid" not in s:
            raise ConfigError("sweep needs 'base_arm' and 'grid'")
        s["base_arm"] = ArmConfig.from_dict(s["base_arm"])
        allowed = set(VARIANTS[s["base_arm"].variant][1]) | {"step_size"}
        bad = set(s["grid"]) - allowed
        if bad:
            raise ConfigError(f"sweep grid keys {sorted(bad)} are not parameters of {s['base_arm'].variant}")
        d["sweep"] = SweepConfig(**s)
    experiment = d.get("experiment", "gridworld")
    if experiment == "gridworld" and not d.get("arms"):
        d.setdefault("arms", [ArmConfig.from_dict(a) for a in GRIDWORLD_ARMS])
        if "comparisons" not in d:
            d["comparisons"] = [Comparison(**c) for c in GRIDWORLD_COMPARISONS]
    try:
        return ExperimentConfig(**d)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(doc)
