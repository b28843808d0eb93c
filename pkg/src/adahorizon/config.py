"""Experiment configuration.

One YAML file with a section per module; unknown sections or keys are
rejected. CLI flags override file values, and the effective merged config
is echoed into every output directory.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .ensemble import ENSEMBLER_NAMES, AdaHorizonParams
from .policy import TrainConfig
from .sim import PerturbSpec

CONDITIONS = ("original", "ood_task", "ood_env", "static_distractors", "dynamic_distractor")
SUITE_CONDITIONS = ("static_distractors", "dynamic_distractor", "ood_task", "ood_env")


class ConfigError(ValueError):
    """Bad configuration; the CLI maps this to exit code 2."""


def _build_section(cls, data: dict, name: str):
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in section '{name}': {', '.join(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad value in section '{name}': {e}") from e


@dataclass
class DatasetSection:
    n: int = 1200
    seed: int = 0
    dir: str = "data"
    exec_noise_std: float = 0.0
    grip_flip_prob: float = 0.25
    scatter_prob: float = 0.3


@dataclass
class TrainSection:
    lam: float = 1.0
    ce_weight: float = 1.0
    learning_rate: float = 1e-3
    batch_size: int = 192
    iterations: int = 3000
    seed: int = 0
    chunk_len: int = 8
    checkpoint: str = "checkpoint.npz"

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lam=self.lam,
            ce_weight=self.ce_weight,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            iterations=self.iterations,
            seed=self.seed,
        )


@dataclass
class EnsemblerSection:
    method: str = "adahorizon"
    min_actions: int = 4
    threshold: float = 0.06
    replan_threshold: float = 0.12
    max_replan_count: int = 5
    next_task_thresh: int = 3
    temporal_m: float = 0.01
    conf_theta: float = 0.8

    def adahorizon_params(self) -> AdaHorizonParams:
        return AdaHorizonParams(
            min_actions=self.min_actions,
            threshold=self.threshold,
            replan_threshold=self.replan_threshold,
            max_replan_count=self.max_replan_count,
            next_task_thresh=self.next_task_thresh,
        )


@dataclass
class EvalSection:
    conditions: list = field(default_factory=lambda: list(CONDITIONS))
    suite_conditions: list = field(default_factory=lambda: list(SUITE_CONDITIONS))
    methods: list = field(default_factory=lambda: ["adahorizon", "fixed_disc", "fixed_cont"])
    episodes: int = 50
    seed0: int = 0
    checkpoint: str = ""  # empty -> train.checkpoint


@dataclass
class LatencySection:
    iterations: int = 10000
    forward_iterations: int = 1000
    warmup: int = 100
    chunk_len: int = 8


@dataclass
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    train: TrainSection = field(default_factory=TrainSection)
    ensembler: EnsemblerSection = field(default_factory=EnsemblerSection)
    eval: EvalSection = field(default_factory=EvalSection)
    latency: LatencySection = field(default_factory=LatencySection)
    chain: dict | None = None  # optional kinematic chain spec
    out: str = "runs/out"
    jobs: int = 1

    SECTION_TYPES = {
        "dataset": DatasetSection,
        "train": TrainSection,
        "ensembler": EnsemblerSection,
        "eval": EvalSection,
        "latency": LatencySection,
    }

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data or {})
        known = set(cls.SECTION_TYPES) | {"chain", "out", "jobs"}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
        kwargs = {}
        for name, typ in cls.SECTION_TYPES.items():
            section = data.get(name, {})
            if not isinstance(section, dict):
                raise ConfigError(f"section '{name}' must be a mapping")
            if name == "train" and "lambda" in section:
                section = dict(section)
                section["lam"] = section.pop("lambda")
            kwargs[name] = _build_section(typ, section, name)
        cfg = cls(
            chain=data.get("chain"),
            out=str(data.get("out", "runs/out")),
            jobs=int(data.get("jobs", 1)),
            **kwargs,
        )
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        d = {name: asdict(getattr(self, name)) for name in self.SECTION_TYPES}
        d["chain"] = self.chain
        d["out"] = self.out
        d["jobs"] = self.jobs
        return d

    def validate(self) -> None:
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        if self.dataset.n < 1:
            raise ConfigError("dataset.n must be >= 1")
        if self.train.chunk_len < 1:
            raise ConfigError("train.chunk_len must be >= 1")
        if self.latency.chunk_len < 1:
            raise ConfigError("latency.chunk_len must be >= 1")
        if self.latency.iterations < 1 or self.latency.forward_iterations < 1:
            raise ConfigError("latency iteration counts must be >= 1")
        if self.eval.episodes < 1:
            raise ConfigError("eval.episodes must be >= 1")
        for cond in list(self.eval.conditions) + list(self.eval.suite_conditions):
            if cond not in CONDITIONS:
                raise ConfigError(f"unknown condition '{cond}'; choose from {CONDITIONS}")
        for m in self.eval.methods:
            if m not in ENSEMBLER_NAMES:
                raise ConfigError(f"unknown method '{m}'; choose from {ENSEMBLER_NAMES}")
        if self.ensembler.method not in ENSEMBLER_NAMES:
            raise ConfigError(f"unknown method '{self.ensembler.method}'")
        try:
            self.ensembler.adahorizon_params().validate()
            self.train.train_config().validate()
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def eval_checkpoint(self) -> str:
        return self.eval.checkpoint or self.train.checkpoint


def perturb_for_condition(condition: str) -> PerturbSpec:
    if condition == "original":
        return PerturbSpec(mode="none")
    if condition not in CONDITIONS:
        raise ConfigError(f"unknown condition '{condition}'")
    return PerturbSpec(mode=condition)


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = yaml.safe_load(p.read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"config parse error: {e}") from e
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    return ExperimentConfig.from_dict(data)


def apply_overrides(cfg: ExperimentConfig, sets) -> ExperimentConfig:
    """Apply 'section.key=value' overrides (values parsed as YAML scalars)."""
    data = cfg.to_dict()
    for item in sets or []:
        if "=" not in item:
            raise ConfigError(f"override must look like section.key=value, got '{item}'")
        key, _, raw = item.partition("=")
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ConfigError(f"unknown override path '{key}'")
            node = node[p]
        leaf = parts[-1]
        if leaf not in node:
            raise ConfigError(f"unknown override key '{key}'")
        try:
            node[leaf] = yaml.safe_load(raw)
        except yaml.YAMLError as e:
            raise ConfigError(f"bad override value '{raw}': {e}") from e
    return ExperimentConfig.from_dict(data)


def echo_config(cfg: ExperimentConfig, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.echo", "w") as f:
        yaml.safe_dump(cfg.to_dict(), f, sort_keys=True)
