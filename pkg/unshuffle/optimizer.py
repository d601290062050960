"""
Optimizer - trains shared-extractor / per-environment-head models.

Minimizes ``sum_e L_e(w_e f_theta) + lambda * Var_e(w_e)`` with AdaDelta.
Every step draws one mini-batch from each environment.  After the warm-up
epochs, an optional alternating schedule updates the extractor on even steps
and the heads on odd steps.  The merged head (mean or median of the
environment heads) is evaluated on the validation set after every epoch,
and the parameters of the best epoch are returned.
"""

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from unshuffle.dataset import Dataset
from unshuffle.model import (
    MERGED,
    Batch,
    HeadParams,
    ModelParams,
    init_params,
    loss_and_grad,
)
from unshuffle.regularizers import (
    RelDenominator,
    VarianceMode,
    accumulate,
    grad_irmv1,
    grad_variance,
    head_stack,
    set_head_gradients,
    variance,
)

logger = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    """A gradient, loss or objective became NaN or infinite."""


class Objective(str, Enum):
    VARIANCE = "variance"
    ERM = "erm"
    IRMV1 = "irmv1"

    @classmethod
    def _missing_(cls, value):
        if value == "eq2":
            return cls.VARIANCE
        return None


class MergeMode(str, Enum):
    MEAN = "mean"
    MEDIAN = "median"


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    lam: float = 1.0
    variance_mode: VarianceMode = VarianceMode.RELATIVE
    rel_denominator: RelDenominator = RelDenominator.L1
    alternating: bool = False
    warmup_epochs: int = 0
    batch_size: int = 64
    max_epochs: int = 30
    patience: int = 5
    adadelta_rho: float = 0.95
    adadelta_eps: float = 1e-6
    seed: int = 0
    merge_mode: MergeMode = MergeMode.MEAN
    objective: Objective = Objective.VARIANCE
    hidden_dims: List[int] = field(default_factory=lambda: [32])
    feature_dim: int = 16
    activation: str = "relu"

    def __post_init__(self) -> None:
        self.variance_mode = VarianceMode(self.variance_mode)
        self.rel_denominator = RelDenominator(self.rel_denominator)
        self.merge_mode = MergeMode(self.merge_mode)
        self.objective = Objective(self.objective)
        self.hidden_dims = [int(d) for d in self.hidden_dims]
        self.validate()

    def validate(self) -> None:
        checks = [
            ("lam", self.lam >= 0.0 and math.isfinite(self.lam), "must be a finite value >= 0"),
            ("warmup_epochs", self.warmup_epochs >= 0, "must be >= 0"),
            ("batch_size", self.batch_size >= 1, "must be >= 1"),
            ("max_epochs", self.max_epochs >= 1, "must be >= 1"),
            ("warmup_epochs", self.warmup_epochs <= self.max_epochs, "must not exceed max_epochs"),
            ("patience", self.patience >= 1, "must be >= 1"),
            ("adadelta_rho", 0.0 < self.adadelta_rho < 1.0, "must lie in (0, 1)"),
            ("adadelta_eps", self.adadelta_eps > 0.0, "must be > 0"),
            ("feature_dim", self.feature_dim >= 1, "must be >= 1"),
        ]
        for name, ok, message in checks:
            if not ok:
                raise ValueError(f"TrainConfig.{name} {message}, got {getattr(self, name)!r}")

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        for key, value in data.items():
            if isinstance(value, Enum):
                data[key] = value.value
        # "lambda" is reserved in Python, so the attribute is `lam`
        data["lambda"] = data.pop("lam")
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainConfig":
        data = dict(data)
        if "lambda" in data:
            data["lam"] = data.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields {sorted(unknown)}")
        return cls(**data)

    def replace(self, **changes: Any) -> "TrainConfig":
        data = self.to_dict()
        if "lam" in changes:
            changes["lambda"] = changes.pop("lam")
        data.update(changes)
        return TrainConfig.from_dict(data)


# ---------------------------------------------------------------------------
# AdaDelta
# ---------------------------------------------------------------------------

@dataclass
class AdaDeltaState:
    """Running averages ``E[g^2]`` and ``E[dx^2]``, one pair per tensor."""

    sq_grad: List[np.ndarray]
    sq_update: List[np.ndarray]
    rho: float = 0.95
    eps: float = 1e-6

    @classmethod
    def zeros_like(cls, tensors: Sequence[np.ndarray], rho: float = 0.95, eps: float = 1e-6) -> "AdaDeltaState":
        return cls(
            sq_grad=[np.zeros_like(t) for t in tensors],
            sq_update=[np.zeros_like(t) for t in tensors],
            rho=rho,
            eps=eps,
        )


def adadelta_step(
    state: AdaDeltaState,
    params_view: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    names: Optional[Sequence[str]] = None,
    mask: Optional[Sequence[bool]] = None,
) -> Tuple[Sequence[np.ndarray], AdaDeltaState]:
    """One AdaDelta update, applied in place to ``params_view`` and ``state``.

    Tensors whose ``mask`` entry is False are left untouched, accumulators
    included.
    """
    if not (len(params_view) == len(grads) == len(state.sq_grad)):
        raise ValueError("params, gradients and state must have the same number of tensors")
    names = names or [f"tensor[{i}]" for i in range(len(params_view))]
    mask = mask or [True] * len(params_view)

    for i, (param, grad) in enumerate(zip(params_view, grads)):
        if param.shape != grad.shape or param.shape != state.sq_grad[i].shape:
            raise ValueError(f"shape mismatch for {names[i]}: {param.shape} vs {grad.shape}")
        if not np.all(np.isfinite(grad)):
            raise TrainingDivergedError(f"non-finite gradient in {names[i]}")

    rho, eps = state.rho, state.eps
    for i, (param, grad) in enumerate(zip(params_view, grads)):
        if not mask[i]:
            continue
        sq_grad = state.sq_grad[i]
        sq_update = state.sq_update[i]
        sq_grad *= rho
        sq_grad += (1.0 - rho) * grad ** 2
        delta = -np.sqrt(sq_update + eps) / np.sqrt(sq_grad + eps) * grad
        sq_update *= rho
        sq_update += (1.0 - rho) * delta ** 2
        param += delta
    return params_view, state


# ---------------------------------------------------------------------------
# Head merging
# ---------------------------------------------------------------------------

def merge_heads(params: ModelParams, mode: MergeMode = MergeMode.MEAN) -> ModelParams:
    """Set ``params.merged`` to the elementwise mean or median of the heads."""
    weights = np.stack([h.weights for h in params.heads])
    biases = np.stack([h.bias for h in params.heads])
    reduce = np.mean if MergeMode(mode) is MergeMode.MEAN else np.median
    params.merged = HeadParams(
        weights=reduce(weights, axis=0), bias=reduce(biases, axis=0), env_id=-1
    )
    return params


# ---------------------------------------------------------------------------
# Run report
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    env_losses: List[float]
    variance: float
    objective: float
    val_acc: float
    ood_acc: Optional[float] = None


@dataclass
class RunReport:
    config: Dict[str, Any]
    seed: int
    epochs: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_val_acc: float = float("nan")
    best_ood_acc: Optional[float] = None
    final_variance: float = float("nan")
    stopped_early: bool = False

    def trace_frame(self) -> pd.DataFrame:
        n_envs = max((len(r.env_losses) for r in self.epochs), default=0)
        rows = []
        for record in self.epochs:
            row: Dict[str, Any] = {"epoch": record.epoch}
            for e in range(n_envs):
                row[f"loss_env{e}"] = record.env_losses[e]
            row["variance"] = record.variance
            row["objective"] = record.objective
            row["val_acc"] = record.val_acc
            row["ood_acc"] = record.ood_acc
            rows.append(row)
        columns = ["epoch", *[f"loss_env{e}" for e in range(n_envs)], "variance", "objective", "val_acc", "ood_acc"]
        return pd.DataFrame(rows, columns=columns)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunReport":
        data = dict(data)
        data["epochs"] = [EpochRecord(**record) for record in data.get("epochs", [])]
        return cls(**data)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

class _BatchStream:
    """Endless shuffled stream of mini-batch indices over one environment."""

    def __init__(self, size: int, batch_size: int, rng: np.random.Generator) -> None:
        self.size = size
        self.batch_size = min(batch_size, size)
        self.rng = rng
        self._order = rng.permutation(size)
        self._cursor = 0

    def next(self) -> np.ndarray:
        taken: List[np.ndarray] = []
        needed = self.batch_size
        while needed > 0:
            if self._cursor == self.size:
                self._order = self.rng.permutation(self.size)
                self._cursor = 0
            chunk = self._order[self._cursor : self._cursor + needed]
            self._cursor += chunk.size
            needed -= chunk.size
            taken.append(chunk)
        return np.concatenate(taken)


def _check_finite(value: float, what: str) -> float:
    if not math.isfinite(value):
        raise TrainingDivergedError(f"{what} became {value}")
    return value


class Trainer:
    """Runs one training job; owns its parameters, optimizer state and RNG streams.

    Parameters
    ----------
    config:
        Hyperparameters of the run.
    envs:
        One dataset per training environment.
    val:
        Held-out set used to pick the best epoch.
    test:
        Optional OOD set, evaluated every epoch for reporting only.
    """

    def __init__(
        self,
        config: TrainConfig,
        envs: Sequence[Dataset],
        val: Dataset,
        test: Optional[Dataset] = None,
    ) -> None:
        if len(envs) < 1:
            raise ValueError("at least one training environment is required")
        for e, env in enumerate(envs):
            if env is None or len(env) == 0:
                raise ValueError(f"environment {e} is empty")
        if config.objective is Objective.ERM and len(envs) != 1:
            raise ValueError(f"objective=erm needs exactly 1 environment, got {len(envs)}")
        if val is None or len(val) == 0:
            raise ValueError("validation set must be non-empty")
        first = envs[0]
        for e, env in enumerate([*envs, val] + ([test] if test is not None else [])):
            if env.input_dim != first.input_dim or env.num_classes != first.num_classes:
                raise ValueError(f"dataset {e} schema does not match environment 0")

        self.config = config
        self.envs = list(envs)
        self.val = val
        self.test = test
        n_heads = 1 if config.objective is Objective.IRMV1 else len(self.envs)
        self.params = init_params(
            input_dim=first.input_dim,
            hidden_dims=config.hidden_dims,
            feature_dim=config.feature_dim,
            num_classes=first.num_classes,
            num_envs=n_heads,
            seed=config.seed,
            activation=config.activation,
        )
        self.names = [name for name, _ in self.params.tensors()]
        self.state = AdaDeltaState.zeros_like(
            [t for _, t in self.params.tensors()], rho=config.adadelta_rho, eps=config.adadelta_eps
        )
        # one shuffle seed for every environment: identical environments draw identical batches
        shuffle_seed = np.random.SeedSequence(config.seed).spawn(1)[0]
        self.streams = [
            _BatchStream(len(env), config.batch_size, np.random.default_rng(shuffle_seed))
            for env in self.envs
        ]
        self.steps_per_epoch = math.ceil(min(len(env) for env in self.envs) / config.batch_size)

    # ------------------------------------------------------------------
    # One optimization step
    # ------------------------------------------------------------------

    def _uses_variance(self) -> bool:
        return self.config.objective is Objective.VARIANCE and len(self.params.heads) >= 2

    def _variance_value(self) -> float:
        if len(self.params.heads) < 2:
            return 0.0
        return variance(head_stack(self.params), self.config.variance_mode, self.config.rel_denominator)

    def _step(self, phase: str) -> List[float]:
        """Compute gradients of the objective on fresh batches and update.

        ``phase`` is ``"joint"``, ``"extractor"`` or ``"heads"``.
        """
        config = self.config
        batches = []
        for env, stream in zip(self.envs, self.streams):
            idx = stream.next()
            batches.append(Batch(env.features[idx], env.labels[idx]))

        grads = self.params.zeros_like()
        losses = []
        for e, batch in enumerate(batches):
            head = 0 if config.objective is Objective.IRMV1 else e
            loss, env_grads = loss_and_grad(self.params, head, batch)
            losses.append(_check_finite(loss, f"loss of environment {e}"))
            accumulate(grads, env_grads)

        if config.lam > 0.0 and phase != "extractor":
            if self._uses_variance():
                stack_grad = grad_variance(
                    head_stack(self.params), config.variance_mode, config.rel_denominator
                )
                set_head_gradients(grads, stack_grad, scale=config.lam)
            elif config.objective is Objective.IRMV1:
                _, penalty_grads = grad_irmv1(self.params, batches)
                accumulate(grads, penalty_grads, scale=config.lam)

        mask = [
            phase == "joint" or (name.startswith("head.") == (phase == "heads"))
            for name in self.names
        ]
        adadelta_step(
            self.state,
            [t for _, t in self.params.tensors()],
            [t for _, t in grads.tensors()],
            names=self.names,
            mask=mask,
        )
        return losses

    # ------------------------------------------------------------------
    # Epoch loop
    # ------------------------------------------------------------------

    def run(self) -> Tuple[ModelParams, RunReport]:
        from unshuffle.evaluation import accuracy

        config = self.config
        report = RunReport(config=config.to_dict(), seed=config.seed)
        best_params: Optional[ModelParams] = None
        since_best = 0
        step = 0

        for epoch in range(config.max_epochs):
            alternate = config.alternating and epoch >= config.warmup_epochs
            loss_sums = np.zeros(len(self.envs))
            for _ in range(self.steps_per_epoch):
                if alternate:
                    phase = "extractor" if step % 2 == 0 else "heads"
                    step += 1
                else:
                    phase = "joint"
                loss_sums += self._step(phase)

            env_losses = (loss_sums / self.steps_per_epoch).tolist()
            var_value = _check_finite(self._variance_value(), "head variance")
            objective = _check_finite(
                float(sum(env_losses)) + (config.lam * var_value if self._uses_variance() else 0.0),
                "objective",
            )
            merge_heads(self.params, config.merge_mode)
            val_acc = accuracy(self.params, MERGED, self.val)
            ood_acc = accuracy(self.params, MERGED, self.test) if self.test is not None else None
            report.epochs.append(
                EpochRecord(epoch, env_losses, var_value, objective, val_acc, ood_acc)
            )
            logger.info(
                "[Trainer] epoch %d losses=%s variance=%.4g val_acc=%.2f%s",
                epoch,
                ["%.4f" % l for l in env_losses],
                var_value,
                val_acc,
                "" if ood_acc is None else f" ood_acc={ood_acc:.2f}",
            )

            if best_params is None or val_acc > report.best_val_acc:
                best_params = self.params.copy()
                report.best_epoch = epoch
                report.best_val_acc = val_acc
                report.best_ood_acc = ood_acc
                report.final_variance = var_value
                since_best = 0
            else:
                since_best += 1
                if since_best >= config.patience:
                    report.stopped_early = True
                    logger.info(
                        "[Trainer] early stop at epoch %d (best epoch %d, val_acc=%.2f)",
                        epoch,
                        report.best_epoch,
                        report.best_val_acc,
                    )
                    break

        assert best_params is not None
        return best_params, report


def train(
    config: TrainConfig,
    envs: Sequence[Dataset],
    val: Dataset,
    test: Optional[Dataset] = None,
) -> Tuple[ModelParams, RunReport]:
    """Train under the configured objective; returns best-epoch params with a merged head."""
    return Trainer(config, envs, val, test).run()
