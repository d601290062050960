"""
Experiment configuration.

A JSON document with the sections ``data``, ``partition``, ``train``,
``eval``, ``sweep`` and ``output`` is loaded into nested dataclasses.
Unknown keys are rejected with their dotted path.  Process-level settings
(worker cap, log level) come from the environment, optionally via ``.env``.
"""

import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from dotenv import load_dotenv

from unshuffle.datagen import SpuriousSpec, TokenGroupsConfig
from unshuffle.evaluation import SWEEP_AXES, PartitionSpec, SweepSpec
from unshuffle.optimizer import TrainConfig
from unshuffle.partitioning import STRATEGIES

GENERATORS = ("spurious", "token_groups")
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class ConfigError(ValueError):
    """Invalid experiment configuration or environment setting."""


def _check_keys(cls, data: Any, path: str) -> Dict[str, Any]:
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be an object, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown config key '{path + '.' if path else ''}{key}'")
    return dict(data)


def _wrap(section: str, builder, *args):
    try:
        return builder(*args)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{section}: {e}") from e


# ---------------------------------------------------------------------------
# Sections
# ---------------------------------------------------------------------------

@dataclass
class DataSection:
    """Either a generator spec or paths to JSONL datasets.

    ``dir`` points at the output of ``gen``; its manifest supplies the
    train / val / test files.
    """

    generator: Optional[str] = None
    seed: int = 0
    spurious: Optional[SpuriousSpec] = None
    token_groups: Optional[TokenGroupsConfig] = None
    n_val: int = 500
    n_test: int = 1000
    dir: Optional[str] = None
    train: List[str] = field(default_factory=list)
    val: Optional[str] = None
    test: Optional[str] = None
    num_classes: Optional[int] = None
    sample_fraction: Optional[float] = None
    holdout: int = 0

    def validate(self) -> None:
        if self.generator is not None and self.generator not in GENERATORS:
            raise ConfigError(f"data.generator must be one of {GENERATORS}, got {self.generator!r}")
        if self.generator == "spurious":
            self.spurious = self.spurious or SpuriousSpec()
            _wrap("data.spurious", self.spurious.validate)
        if self.generator == "token_groups":
            self.token_groups = self.token_groups or TokenGroupsConfig()
            _wrap("data.token_groups", self.token_groups.validate)
        if self.n_val < 1 or self.n_test < 1:
            raise ConfigError("data.n_val and data.n_test must be >= 1")
        if self.sample_fraction is not None and not 0.0 < self.sample_fraction <= 1.0:
            raise ConfigError(f"data.sample_fraction must lie in (0, 1], got {self.sample_fraction}")
        if self.holdout < 0:
            raise ConfigError(f"data.holdout must be >= 0, got {self.holdout}")

    def check_paths(self) -> None:
        if self.dir is not None and not (Path(self.dir) / "manifest.json").is_file():
            raise ConfigError(f"data.dir: no manifest.json in {self.dir}")
        for key, value in [("train", p) for p in self.train] + [("val", self.val), ("test", self.test)]:
            if value is not None and not Path(value).is_file():
                raise ConfigError(f"data.{key}: file not found: {value}")

    def to_dict(self) -> Dict[str, Any]:
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        data["spurious"] = self.spurious.to_dict() if self.spurious else None
        data["token_groups"] = self.token_groups.to_dict() if self.token_groups else None
        data["train"] = list(self.train)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DataSection":
        data = _check_keys(cls, data, "data")
        if data.get("spurious") is not None:
            data["spurious"] = _wrap("data.spurious", SpuriousSpec.from_dict, data["spurious"])
        if data.get("token_groups") is not None:
            data["token_groups"] = _wrap("data.token_groups", TokenGroupsConfig.from_dict, data["token_groups"])
        if isinstance(data.get("train"), str):
            data["train"] = [data["train"]]
        section = cls(**data)
        section.validate()
        return section


@dataclass
class PartitionSection:
    strategy: str = "none"
    E: int = 1
    K: Optional[int] = None
    key: str = "group"
    min_count: int = 10
    seed: int = 0
    file: Optional[str] = None

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"partition.strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.E < 1:
            raise ConfigError(f"partition.E must be >= 1, got {self.E}")
        if self.strategy == "clustering" and (self.K is None or self.K < 1):
            raise ConfigError("partition.K must be >= 1 for the clustering strategy")
        if self.key not in ("group", "dataset_id"):
            raise ConfigError(f"partition.key must be 'group' or 'dataset_id', got {self.key!r}")

    def spec(self) -> PartitionSpec:
        return PartitionSpec(
            strategy=self.strategy, E=self.E, K=self.K, key=self.key, min_count=self.min_count
        )

    def to_dict(self) -> Dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PartitionSection":
        section = cls(**_check_keys(cls, data, "partition"))
        section.validate()
        return section


@dataclass
class EvalSection:
    ensemble_size: int = 1
    repeats: int = 3
    irm_lambda: Optional[float] = None

    def validate(self) -> None:
        if self.ensemble_size < 1:
            raise ConfigError(f"eval.ensemble_size must be >= 1, got {self.ensemble_size}")
        if self.repeats < 1:
            raise ConfigError(f"eval.repeats must be >= 1, got {self.repeats}")

    def to_dict(self) -> Dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "EvalSection":
        section = cls(**_check_keys(cls, data, "eval"))
        section.validate()
        return section


@dataclass
class SweepSection:
    axis: str = "lambda"
    grid: List[float] = field(default_factory=list)
    repeats: int = 1

    def validate(self) -> None:
        if self.axis not in SWEEP_AXES:
            raise ConfigError(f"sweep.axis must be one of {SWEEP_AXES}, got {self.axis!r}")
        if self.repeats < 1:
            raise ConfigError(f"sweep.repeats must be >= 1, got {self.repeats}")
        if self.grid:
            self.spec(TrainConfig(), PartitionSpec())

    def spec(self, base_config: TrainConfig, partition: PartitionSpec) -> SweepSpec:
        return _wrap("sweep", SweepSpec, self.axis, list(self.grid), self.repeats, base_config, partition)

    def to_dict(self) -> Dict[str, Any]:
        return {"axis": self.axis, "grid": list(self.grid), "repeats": self.repeats}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SweepSection":
        section = cls(**_check_keys(cls, data, "sweep"))
        section.validate()
        return section


@dataclass
class OutputSection:
    dir: str = "runs/experiment"

    def to_dict(self) -> Dict[str, Any]:
        return {"dir": self.dir}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "OutputSection":
        return cls(**_check_keys(cls, data, "output"))


@dataclass
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    partition: PartitionSection = field(default_factory=PartitionSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    output: OutputSection = field(default_factory=OutputSection)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExperimentConfig":
        data = _check_keys(cls, data, "")
        train = data.get("train", {})
        if not isinstance(train, dict):
            raise ConfigError("train must be an object")
        unknown = set(train) - {f.name for f in fields(TrainConfig)} - {"lambda"}
        if unknown:
            raise ConfigError(f"unknown config key 'train.{sorted(unknown)[0]}'")
        return cls(
            data=DataSection.from_dict(data.get("data", {})),
            partition=PartitionSection.from_dict(data.get("partition", {})),
            train=_wrap("train", TrainConfig.from_dict, train),
            eval=EvalSection.from_dict(data.get("eval", {})),
            sweep=SweepSection.from_dict(data.get("sweep", {})),
            output=OutputSection.from_dict(data.get("output", {})),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "data": self.data.to_dict(),
            "partition": self.partition.to_dict(),
            "train": self.train.to_dict(),
            "eval": self.eval.to_dict(),
            "sweep": self.sweep.to_dict(),
            "output": self.output.to_dict(),
        }


def load_config(path: Union[str, Path], check_paths: bool = True) -> ExperimentConfig:
    path = Path(path)
    try:
        with path.open("r", encoding="utf-8") as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}")
    config = ExperimentConfig.from_dict(raw)
    if check_paths:
        config.data.check_paths()
        if config.partition.file is not None and not Path(config.partition.file).is_file():
            raise ConfigError(f"partition.file: file not found: {config.partition.file}")
    return config


def echo(config: ExperimentConfig) -> Dict[str, Any]:
    """Resolved config; ``ExperimentConfig.from_dict(echo(c)) == c``."""
    return config.to_dict()


def write_echo(config: ExperimentConfig, directory: Union[str, Path]) -> Path:
    path = Path(directory) / "config.json"
    with path.open("w", encoding="utf-8") as f:
        json.dump(echo(config), f, indent=2, sort_keys=True)
        f.write("\n")
    return path


# ---------------------------------------------------------------------------
# Process settings
# ---------------------------------------------------------------------------

@dataclass
class Settings:
    threads: int = 1
    log_level: str = "INFO"


def load_settings() -> Settings:
    """Read UNSHUFFLE_THREADS and UNSHUFFLE_LOG_LEVEL, loading ``.env`` if present."""
    load_dotenv()
    raw_threads = os.getenv("UNSHUFFLE_THREADS", "1")
    try:
        threads = int(raw_threads)
    except ValueError:
        raise ConfigError(f"UNSHUFFLE_THREADS must be an integer, got {raw_threads!r}")
    if threads < 1:
        raise ConfigError(f"UNSHUFFLE_THREADS must be >= 1, got {threads}")
    level = os.getenv("UNSHUFFLE_LOG_LEVEL", "INFO").upper()
    if not isinstance(logging.getLevelName(level), int):
        raise ConfigError(f"UNSHUFFLE_LOG_LEVEL is not a log level: {level!r}")
    return Settings(threads=threads, log_level=level)


class _StderrHandler(logging.StreamHandler):
    """Writes to whatever ``sys.stderr`` is at emit time."""

    _unshuffle = True

    def __init__(self) -> None:
        super().__init__(sys.stderr)

    @property
    def stream(self):
        return sys.stderr

    @stream.setter
    def stream(self, value) -> None:
        pass


def configure_logging(level: str = "INFO") -> logging.Logger:
    logger = logging.getLogger("unshuffle")
    logger.setLevel(level)
    if not any(isinstance(h, _StderrHandler) for h in logger.handlers):
        handler = _StderrHandler()
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        logger.addHandler(handler)
    return logger
