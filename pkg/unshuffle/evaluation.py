"""
Evaluation - accuracy, prediction-averaging ensembles, sweeps and comparisons.
"""

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from unshuffle.dataset import Dataset
from unshuffle.model import HeadSelector, ModelParams, forward
from unshuffle.optimizer import Objective, RunReport, TrainConfig, TrainingDivergedError, train
from unshuffle.partitioning import STRATEGIES, build_environments, group_rand_index, index_partition, splits_by_index

logger = logging.getLogger(__name__)

SWEEP_AXES = ("lambda", "E", "K")
SWEEP_COLUMNS = [
    "axis_value",
    "mean_val_acc",
    "std_val_acc",
    "mean_ood_acc",
    "std_ood_acc",
    "mean_final_variance",
    "mean_rand_index",
    "runs",
    "failed_runs",
]


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def _score(probs: np.ndarray, dataset: Dataset) -> float:
    if len(dataset) == 0:
        raise ValueError("cannot score an empty dataset")
    # argmax picks the lowest class index on ties
    predicted = np.argmax(probs, axis=1)
    if dataset.multi_hot:
        correct = float(dataset.labels[np.arange(len(dataset)), predicted].sum())
    else:
        correct = float(np.sum(predicted == dataset.labels))
    return 100.0 * correct / len(dataset)


def accuracy(params: ModelParams, selector: HeadSelector, dataset: Dataset) -> float:
    """Percentage of examples whose highest-probability class is correct.

    For multi-hot labels the predicted class earns its target score.
    """
    if dataset is None or len(dataset) == 0:
        raise ValueError("cannot score an empty dataset")
    return _score(forward(params, selector, dataset.features), dataset)


def ensemble_predict(
    models: Sequence[ModelParams], selector: HeadSelector, x: Union[np.ndarray, Dataset]
) -> np.ndarray:
    """Elementwise mean of the member models' output probabilities."""
    if not models:
        raise ValueError("an ensemble needs at least one model")
    features = x.features if isinstance(x, Dataset) else np.asarray(x, dtype=np.float64)
    first = models[0]
    for k, model in enumerate(models[1:], 1):
        if (
            model.extractor.input_dim != first.extractor.input_dim
            or model.num_classes != first.num_classes
        ):
            raise ValueError(f"model {k} is incompatible with model 0 (input or class dimension differs)")
    total = forward(first, selector, features)
    for model in models[1:]:
        total = total + forward(model, selector, features)
    return total / len(models)


def ensemble_accuracy(models: Sequence[ModelParams], selector: HeadSelector, dataset: Dataset) -> float:
    return _score(ensemble_predict(models, selector, dataset), dataset)


# ---------------------------------------------------------------------------
# Single runs
# ---------------------------------------------------------------------------

@dataclass
class PartitionSpec:
    strategy: str = "none"
    E: int = 1
    K: Optional[int] = None
    key: str = "group"
    min_count: int = 10

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown partition strategy {self.strategy!r}, expected one of {STRATEGIES}")
        if self.E < 1:
            raise ValueError(f"PartitionSpec.E must be >= 1, got {self.E}")

    def replace(self, **changes: Any) -> "PartitionSpec":
        data = asdict(self)
        data.update(changes)
        return PartitionSpec(**data)


@dataclass
class RunResult:
    seed: int
    val_acc: float = float("nan")
    ood_acc: Optional[float] = None
    final_variance: float = float("nan")
    rand_index: Optional[float] = None
    error: Optional[str] = None
    params: Optional[ModelParams] = None
    report: Optional[RunReport] = None

    @property
    def failed(self) -> bool:
        return self.error is not None


def run_once(
    config: TrainConfig,
    partition: PartitionSpec,
    datasets: Sequence[Dataset],
    val: Dataset,
    test: Optional[Dataset],
    seed: int,
) -> RunResult:
    """Build environments and train one model; divergence and invalid settings are recorded, not raised."""
    run_config = config.replace(seed=seed)
    rand: Optional[float] = None
    try:
        if splits_by_index(partition.strategy, partition.E):
            pooled, part = index_partition(
                partition.strategy,
                datasets,
                E=partition.E,
                seed=seed,
                K=partition.K,
                key=partition.key,
                min_count=partition.min_count,
            )
            envs = part.subsets(pooled)
            rand = group_rand_index(part, pooled)
        else:
            envs = build_environments(partition.strategy, datasets, E=partition.E, seed=seed)
        if run_config.objective is Objective.ERM and len(envs) > 1:
            envs = [Dataset.concat(envs)]
        params, report = train(run_config, envs, val, test)
    except TrainingDivergedError as e:
        logger.warning("[Sweep] run with seed %d diverged: %s", seed, e)
        return RunResult(seed=seed, error=f"diverged: {e}")
    except ValueError as e:
        logger.warning("[Sweep] run with seed %d failed: %s", seed, e)
        return RunResult(seed=seed, error=str(e))
    return RunResult(
        seed=seed,
        val_acc=report.best_val_acc,
        ood_acc=report.best_ood_acc,
        final_variance=report.final_variance,
        rand_index=rand,
        params=params,
        report=report,
    )


@dataclass
class _RunTask:
    config: TrainConfig
    partition: PartitionSpec
    datasets: List[Dataset]
    val: Dataset
    test: Optional[Dataset]
    seed: int


def _execute(task: _RunTask) -> RunResult:
    return run_once(task.config, task.partition, task.datasets, task.val, task.test, task.seed)


def _run_all(tasks: Sequence[_RunTask], workers: int):
    """Yield results in task order; runs execute concurrently when workers > 1."""
    if workers <= 1:
        for task in tasks:
            yield _execute(task)
        return
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_execute, task) for task in tasks]
        for future in futures:
            yield future.result()


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def _mean(values: Sequence[float]) -> Optional[float]:
    return float(np.mean(values)) if values else None


def _std(values: Sequence[float]) -> Optional[float]:
    return float(np.std(values, ddof=1)) if len(values) >= 2 else None


@dataclass
class ComparisonRow:
    name: str
    runs: int
    failed_runs: int = 0
    axis_value: Optional[float] = None
    mean_val_acc: Optional[float] = None
    std_val_acc: Optional[float] = None
    mean_ood_acc: Optional[float] = None
    std_ood_acc: Optional[float] = None
    mean_final_variance: Optional[float] = None
    mean_rand_index: Optional[float] = None

    @classmethod
    def aggregate(
        cls, name: str, results: Sequence[RunResult], axis_value: Optional[float] = None
    ) -> "ComparisonRow":
        ok = [r for r in results if not r.failed]
        val = [r.val_acc for r in ok]
        ood = [r.ood_acc for r in ok if r.ood_acc is not None]
        var = [r.final_variance for r in ok if math.isfinite(r.final_variance)]
        rand = [r.rand_index for r in ok if r.rand_index is not None]
        return cls(
            name=name,
            runs=len(results),
            failed_runs=len(results) - len(ok),
            axis_value=axis_value,
            mean_val_acc=_mean(val),
            std_val_acc=_std(val),
            mean_ood_acc=_mean(ood),
            std_ood_acc=_std(ood),
            mean_final_variance=_mean(var),
            mean_rand_index=_mean(rand),
        )


@dataclass
class ComparisonReport:
    rows: List[ComparisonRow] = field(default_factory=list)
    axis: Optional[str] = None

    def row(self, name: str) -> ComparisonRow:
        for row in self.rows:
            if row.name == name:
                return row
        raise KeyError(name)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(r) for r in self.rows])

    def to_dict(self) -> Dict[str, Any]:
        return {"axis": self.axis, "rows": [asdict(r) for r in self.rows]}

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")
        return path


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

@dataclass
class SweepSpec:
    axis: str
    grid: List[float]
    repeats: int = 1
    base_config: TrainConfig = field(default_factory=TrainConfig)
    partition: PartitionSpec = field(default_factory=PartitionSpec)

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.axis not in SWEEP_AXES:
            raise ValueError(f"unknown sweep axis {self.axis!r}, expected one of {SWEEP_AXES}")
        if not self.grid:
            raise ValueError("sweep grid must be non-empty")
        if any(b <= a for a, b in zip(self.grid, self.grid[1:])):
            raise ValueError(f"sweep grid must be strictly increasing, got {self.grid}")
        if self.repeats < 1:
            raise ValueError(f"repeats must be >= 1, got {self.repeats}")
        if self.axis == "lambda":
            if self.grid[0] < 0:
                raise ValueError("lambda grid values must be >= 0")
            positive = np.log10([v for v in self.grid if v > 0])
            steps = np.diff(positive)
            if steps.size >= 2 and not np.allclose(steps, steps[0], rtol=1e-6, atol=1e-9):
                raise ValueError(f"lambda grid must be log-spaced, got {self.grid}")
        else:
            if any(float(v) != int(v) or v < 1 for v in self.grid):
                raise ValueError(f"{self.axis} grid must hold positive integers, got {self.grid}")

    def seed(self, point_index: int, repeat: int) -> int:
        return self.base_config.seed + point_index * 1000 + repeat

    def task(
        self,
        value: float,
        datasets: Sequence[Dataset],
        val: Dataset,
        test: Optional[Dataset],
        seed: int,
    ) -> _RunTask:
        config, partition = self.base_config, self.partition
        if self.axis == "lambda":
            config = config.replace(lam=float(value))
        elif self.axis == "E":
            partition = partition.replace(E=int(value))
        else:
            partition = partition.replace(K=int(value))
        return _RunTask(config, partition, list(datasets), val, test, seed)


def sweep(
    spec: SweepSpec,
    datasets: Sequence[Dataset],
    val: Dataset,
    test: Optional[Dataset] = None,
    out_csv: Optional[Union[str, Path]] = None,
    workers: int = 1,
) -> ComparisonReport:
    """Train ``repeats`` runs per grid point and aggregate mean / std.

    Rows are appended to ``out_csv`` as soon as each grid point completes, in
    grid order, so an interrupted sweep keeps its finished points.
    """
    spec.validate()
    tasks = [
        spec.task(value, datasets, val, test, spec.seed(i, r))
        for i, value in enumerate(spec.grid)
        for r in range(spec.repeats)
    ]
    if out_csv is not None:
        out_csv = Path(out_csv)
        out_csv.parent.mkdir(parents=True, exist_ok=True)
        pd.DataFrame(columns=SWEEP_COLUMNS).to_csv(out_csv, index=False)

    report = ComparisonReport(axis=spec.axis)
    pending: List[RunResult] = []
    for result in _run_all(tasks, workers):
        pending.append(result)
        if len(pending) < spec.repeats:
            continue
        value = spec.grid[len(report.rows)]
        row = ComparisonRow.aggregate(f"{spec.axis}={value:g}", pending, axis_value=float(value))
        report.rows.append(row)
        pending = []
        logger.info(
            "[Sweep] %s=%g val=%s ood=%s failed=%d",
            spec.axis,
            value,
            row.mean_val_acc,
            row.mean_ood_acc,
            row.failed_runs,
        )
        if out_csv is not None:
            record = {"axis_value": value, "runs": row.runs, "failed_runs": row.failed_runs}
            for column in SWEEP_COLUMNS[1:7]:
                record[column] = getattr(row, column)
            pd.DataFrame([record], columns=SWEEP_COLUMNS).to_csv(out_csv, mode="a", header=False, index=False)
    return report


# ---------------------------------------------------------------------------
# Method comparison
# ---------------------------------------------------------------------------

def compare_methods(
    config: TrainConfig,
    partition: PartitionSpec,
    datasets: Sequence[Dataset],
    val: Dataset,
    test: Optional[Dataset] = None,
    repeats: int = 3,
    ensemble_size: int = 1,
    irm_lambda: Optional[float] = None,
    workers: int = 1,
) -> ComparisonReport:
    """Ablation table: ERM, random environments, the method, lambda=0, IRMv1, ensembles.

    Every method uses the same seeds (``config.seed + repeat``); ensemble
    member ``k`` of repeat ``r`` uses ``config.seed + r * 1000 + k``.
    """
    if repeats < 1:
        raise ValueError(f"repeats must be >= 1, got {repeats}")
    base = config.seed
    pooled = PartitionSpec(strategy="none")
    random_envs = len(datasets) if partition.strategy == "dataset_id" else partition.E
    variants: List[Tuple[str, TrainConfig, PartitionSpec]] = [
        ("erm", config.replace(objective=Objective.ERM.value), pooled),
        ("random-env", config, partition.replace(strategy="random", E=random_envs)),
        ("method", config, partition),
        ("method-no-reg", config.replace(lam=0.0), partition),
        (
            "irmv1",
            config.replace(
                objective=Objective.IRMV1.value, lam=config.lam if irm_lambda is None else irm_lambda
            ),
            partition,
        ),
    ]
    if partition.strategy in ("none", "augment"):
        # single-environment strategies have no environments to randomize or penalize
        variants = [v for v in variants if v[0] in ("erm", "method")]

    report = ComparisonReport()
    for name, cfg, part in variants:
        tasks = [_RunTask(cfg, part, list(datasets), val, test, base + r) for r in range(repeats)]
        results = list(_run_all(tasks, workers))
        report.rows.append(ComparisonRow.aggregate(name, results))
        logger.info("[Compare] %s ood=%s", name, report.rows[-1].mean_ood_acc)

    if ensemble_size > 1:
        for name, cfg, part in (variants[0], variants[2] if len(variants) > 2 else variants[1]):
            tasks = [
                _RunTask(cfg, part, list(datasets), val, test, base + r * 1000 + k)
                for r in range(repeats)
                for k in range(ensemble_size)
            ]
            members = list(_run_all(tasks, workers))
            ensembles = []
            for r in range(repeats):
                group = members[r * ensemble_size : (r + 1) * ensemble_size]
                if any(m.failed for m in group):
                    ensembles.append(RunResult(seed=base + r, error="ensemble member diverged"))
                    continue
                models = [m.params for m in group]
                ensembles.append(
                    RunResult(
                        seed=base + r,
                        val_acc=ensemble_accuracy(models, "merged", val),  # type: ignore[arg-type]
                        ood_acc=ensemble_accuracy(models, "merged", test) if test is not None else None,  # type: ignore[arg-type]
                    )
                )
            report.rows.append(ComparisonRow.aggregate(f"{name}-ensemble{ensemble_size}", ensembles))
    return report
