"""Experiment configuration and the flat ``section.key = value`` file format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple

from .conformal import ScoreKind
from .exceptions import RankCPError
from .smooth import TAU_RANGE, SmoothConfig

__all__ = ["ExperimentConfig", "load_config", "parse_config_text"]


@dataclass
class DatasetSection:
    name: str = "sbm"
    source: str = "sbm"
    features: str = ""
    edges: str = ""
    labels: str = ""
    blocks: Tuple[int, ...] = (250, 250, 250, 250)
    p_in: float = 0.02
    p_out: float = 0.004
    feature_dim: int = 16
    feature_noise: float = 1.3
    seed: int = 0
    train_ratio: float = 0.2
    valid_ratio: float = 0.1
    calib_fraction: float = 0.5
    holdout_fraction: float = 0.5


@dataclass
class ModelSection:
    hidden: int = 64
    layers: int = 2
    lr: float = 1e-2
    momentum: float = 0.9
    epochs: int = 200
    cor_hidden: int = 64
    cor_layers: int = 2
    cor_lr: float = 5e-2
    cor_epochs: int = 100


@dataclass
class CPSection:
    score: str = "rank"
    alpha: float = 0.05
    tau: float = 1.0
    quantile_tau: float = 0.01
    kappa: int = 1
    lam: float = 1.0


@dataclass
class RunSection:
    seed: int = 0
    runs: int = 10
    splits: int = 100
    jobs: int = 1
    out: str = "results"
    plot: bool = False


# Config-file names that differ from attribute names.
_RENAMES = {("cp", "lambda"): "lam"}
_SECTIONS = ("dataset", "model", "cp", "run")


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce one experiment."""

    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    cp: CPSection = field(default_factory=CPSection)
    run: RunSection = field(default_factory=RunSection)

    def smooth(self) -> SmoothConfig:
        return SmoothConfig(tau=self.cp.tau, kappa=self.cp.kappa, lam=self.cp.lam,
                            alpha=self.cp.alpha, quantile_tau=self.cp.quantile_tau)

    @property
    def score(self) -> ScoreKind:
        return ScoreKind.parse(self.cp.score)

    def validate(self) -> "ExperimentConfig":
        cp, run, ds, model = self.cp, self.run, self.dataset, self.model
        if not 0 < cp.alpha < 1:
            raise RankCPError(f"cp.alpha must lie in (0, 1), got {cp.alpha}")
        ScoreKind.parse(cp.score)
        lo, hi = TAU_RANGE
        for name in ("tau", "quantile_tau"):
            if not lo <= getattr(cp, name) <= hi:
                raise RankCPError(f"cp.{name} must lie in [{lo}, {hi}], got {getattr(cp, name)}")
        if cp.kappa not in (0, 1):
            raise RankCPError(f"cp.kappa must be 0 or 1, got {cp.kappa}")
        if cp.lam < 0:
            raise RankCPError(f"cp.lambda must be >= 0, got {cp.lam}")
        for name in ("runs", "splits", "jobs"):
            if getattr(run, name) < 1:
                raise RankCPError(f"run.{name} must be >= 1")
        if run.seed < 0 or ds.seed < 0:
            raise RankCPError("seeds must be non-negative")
        if ds.source not in ("sbm", "files"):
            raise RankCPError(f"dataset.source must be 'sbm' or 'files', got {ds.source!r}")
        if ds.source == "files" and not (ds.features and ds.edges and ds.labels):
            raise RankCPError("dataset.source=files needs dataset.features, .edges and .labels")
        for name in ("calib_fraction", "holdout_fraction"):
            if not 0 < getattr(ds, name) < 1:
                raise RankCPError(f"dataset.{name} must lie in (0, 1)")
        if not (0 < ds.train_ratio and 0 < ds.valid_ratio and ds.train_ratio + ds.valid_ratio < 1):
            raise RankCPError("dataset.train_ratio and valid_ratio must be positive and sum below 1")
        for name in ("hidden", "layers", "cor_hidden", "cor_layers"):
            if getattr(model, name) < 1:
                raise RankCPError(f"model.{name} must be >= 1")
        for name in ("epochs", "cor_epochs"):
            if getattr(model, name) < 0:
                raise RankCPError(f"model.{name} must be >= 0")
        for name in ("lr", "cor_lr"):
            if not getattr(model, name) > 0:
                raise RankCPError(f"model.{name} must be positive")
        return self

    def replace(self, **overrides) -> "ExperimentConfig":
        """Copy with ``{"cp.alpha": 0.1, ...}``-style overrides applied."""
        new = dataclasses.replace(self, **{s: dataclasses.replace(getattr(self, s))
                                           for s in _SECTIONS})
        for dotted, value in overrides.items():
            section, attr = _resolve(dotted)
            setattr(getattr(new, section), attr, value)
        return new.validate()

    def to_text(self) -> str:
        lines = []
        for section in _SECTIONS:
            obj = getattr(self, section)
            for f in dataclasses.fields(obj):
                name = next((k for (s, k), a in _RENAMES.items() if s == section and a == f.name),
                            f.name)
                lines.append(f"{section}.{name} = {_format(getattr(obj, f.name))}")
        return "\n".join(lines) + "\n"


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _resolve(dotted: str):
    section, _, name = dotted.partition(".")
    if section not in _SECTIONS or not name:
        raise RankCPError(f"unknown config key {dotted!r}")
    attr = _RENAMES.get((section, name), name)
    names = {f.name for f in dataclasses.fields(getattr(ExperimentConfig(), section))}
    if attr not in names:
        raise RankCPError(f"unknown config key {dotted!r}")
    return section, attr


def _coerce(dotted: str, raw: str):
    section, attr = _resolve(dotted)
    default = getattr(getattr(ExperimentConfig(), section), attr)
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
    except ValueError:
        raise RankCPError(f"bad value {raw!r} for {dotted}") from None
    return raw


def parse_config_text(text: str, origin: str = "<config>") -> Dict[str, object]:
    """Parse ``section.key = value`` lines (``#`` comments) into typed overrides."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise RankCPError(f"{origin}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        try:
            values[key] = _coerce(key, value)
        except RankCPError as err:
            raise RankCPError(f"{origin}:{lineno}: {err}") from None
    return values


def load_config(path: Optional[str | Path] = None,
                overrides: Optional[Mapping[str, object]] = None) -> ExperimentConfig:
    """Defaults, then the file's values, then ``overrides`` (already typed)."""
    cfg = ExperimentConfig()
    merged: Dict[str, object] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise RankCPError(f"config file not found: {path}")
        merged.update(parse_config_text(path.read_text(encoding="utf-8"), str(path)))
    for key, value in (overrides or {}).items():
        _resolve(key)
        merged[key] = value
    return cfg.replace(**merged)
