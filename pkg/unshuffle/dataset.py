"""
Dataset - Example records, in-memory datasets, and the JSONL file format.

Every line of a dataset file holds one example::

    {"x": [...], "y": 1, "meta": {"group": "...", "dataset_id": "...",
                                  "forms": [[...], ...], "tokens": ["..."]}}

``y`` is either a class index or a multi-hot list.  All ``meta`` fields are
optional.
"""

import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

Label = Union[int, List[float]]


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------

@dataclass
class Example:
    """One training instance plus the metadata used to build environments."""

    features: List[float]
    label: Label
    group: Optional[str] = None
    dataset_id: Optional[str] = None
    forms: Optional[List[List[float]]] = None
    tokens: Optional[List[str]] = None

    def to_record(self) -> Dict[str, Any]:
        meta: Dict[str, Any] = {}
        if self.group is not None:
            meta["group"] = self.group
        if self.dataset_id is not None:
            meta["dataset_id"] = self.dataset_id
        if self.forms is not None:
            meta["forms"] = [list(map(float, form)) for form in self.forms]
        if self.tokens is not None:
            meta["tokens"] = list(self.tokens)
        label = self.label if isinstance(self.label, int) else [float(v) for v in self.label]
        record: Dict[str, Any] = {"x": [float(v) for v in self.features], "y": label}
        if meta:
            record["meta"] = meta
        return record

    @classmethod
    def from_record(cls, record: Dict[str, Any]) -> "Example":
        if not isinstance(record, dict):
            raise ValueError("record must be a JSON object")
        unknown = set(record) - {"x", "y", "meta"}
        if unknown:
            raise ValueError(f"unknown fields {sorted(unknown)}")
        if "x" not in record or "y" not in record:
            raise ValueError("record needs both 'x' and 'y'")
        features = [float(v) for v in record["x"]]
        raw_label = record["y"]
        if isinstance(raw_label, bool) or not isinstance(raw_label, (int, list)):
            raise ValueError("'y' must be a class index or a multi-hot list")
        label: Label = raw_label if isinstance(raw_label, int) else [float(v) for v in raw_label]
        meta = record.get("meta") or {}
        unknown_meta = set(meta) - {"group", "dataset_id", "forms", "tokens"}
        if unknown_meta:
            raise ValueError(f"unknown meta fields {sorted(unknown_meta)}")
        forms = meta.get("forms")
        return cls(
            features=features,
            label=label,
            group=meta.get("group"),
            dataset_id=meta.get("dataset_id"),
            forms=[[float(v) for v in form] for form in forms] if forms is not None else None,
            tokens=list(meta["tokens"]) if meta.get("tokens") is not None else None,
        )


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------

class Dataset:
    """Ordered collection of examples sharing one input dimension and label space.

    Parameters
    ----------
    examples:
        The examples, in order.  Must be non-empty.
    num_classes:
        Size of the label space.  Inferred from the labels when omitted
        (at least 2 for class-index labels).
    """

    def __init__(self, examples: Sequence[Example], num_classes: Optional[int] = None) -> None:
        if len(examples) == 0:
            raise ValueError("empty dataset")
        self.examples: List[Example] = list(examples)
        self.input_dim = len(self.examples[0].features)
        self.multi_hot = not isinstance(self.examples[0].label, int)
        self.num_classes = num_classes if num_classes is not None else self._infer_classes()
        self._validate()

    def _infer_classes(self) -> int:
        if self.multi_hot:
            return len(self.examples[0].label)  # type: ignore[arg-type]
        return max(2, max(int(ex.label) for ex in self.examples) + 1)  # type: ignore[arg-type]

    def _validate(self) -> None:
        for i, ex in enumerate(self.examples):
            if len(ex.features) != self.input_dim:
                raise ValueError(
                    f"example {i} has {len(ex.features)} features, expected {self.input_dim}"
                )
            if isinstance(ex.label, int) == self.multi_hot:
                raise ValueError(f"example {i} mixes class-index and multi-hot labels")
            if self.multi_hot:
                if len(ex.label) != self.num_classes:  # type: ignore[arg-type]
                    raise ValueError(f"example {i} label has wrong length")
                if any(v < 0.0 or v > 1.0 for v in ex.label):  # type: ignore[union-attr]
                    raise ValueError(f"example {i} label entries must lie in [0, 1]")
            elif not 0 <= ex.label < self.num_classes:  # type: ignore[operator]
                raise ValueError(f"example {i} label {ex.label} out of range")
            for form in ex.forms or []:
                if len(form) != self.input_dim:
                    raise ValueError(f"example {i} has a form of the wrong dimensionality")

    def __len__(self) -> int:
        return len(self.examples)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.num_classes == other.num_classes and self.examples == other.examples

    @cached_property
    def features(self) -> np.ndarray:
        return np.asarray([ex.features for ex in self.examples], dtype=np.float64)

    @cached_property
    def labels(self) -> np.ndarray:
        """Class indices (int[n]) or multi-hot targets (real[n x C])."""
        if self.multi_hot:
            return np.asarray([ex.label for ex in self.examples], dtype=np.float64)
        return np.asarray([ex.label for ex in self.examples], dtype=np.int64)

    # ------------------------------------------------------------------
    # Derived datasets
    # ------------------------------------------------------------------

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset([self.examples[int(i)] for i in indices], num_classes=self.num_classes)

    @staticmethod
    def concat(datasets: Sequence["Dataset"]) -> "Dataset":
        if not datasets:
            raise ValueError("nothing to concatenate")
        first = datasets[0]
        for k, ds in enumerate(datasets[1:], 1):
            if ds.input_dim != first.input_dim or ds.num_classes != first.num_classes:
                raise ValueError(
                    f"dataset {k} schema ({ds.input_dim} features, {ds.num_classes} classes) "
                    f"does not match dataset 0 ({first.input_dim}, {first.num_classes})"
                )
            if ds.multi_hot != first.multi_hot:
                raise ValueError(f"dataset {k} label representation differs from dataset 0")
        return Dataset([ex for ds in datasets for ex in ds.examples], num_classes=first.num_classes)

    def split(self, n_holdout: int, seed: int) -> Tuple["Dataset", "Dataset"]:
        """Hold out ``n_holdout`` random instances, e.g. as a validation set."""
        if not 0 < n_holdout < len(self):
            raise ValueError(f"n_holdout must lie in (0, {len(self)}), got {n_holdout}")
        order = np.random.default_rng(seed).permutation(len(self))
        held = np.sort(order[:n_holdout])
        kept = np.sort(order[n_holdout:])
        return self.subset(kept), self.subset(held)

    def sample_fraction(self, fraction: float, seed: int) -> "Dataset":
        """Random subset used to study the low-data regime."""
        if not 0.0 < fraction <= 1.0:
            raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
        if fraction == 1.0:
            return self
        n_keep = max(1, int(round(fraction * len(self))))
        order = np.random.default_rng(seed).permutation(len(self))
        return self.subset(np.sort(order[:n_keep]))

    def label_counts(self) -> np.ndarray:
        if self.multi_hot:
            return self.labels.sum(axis=0)
        return np.bincount(self.labels, minlength=self.num_classes)


# ---------------------------------------------------------------------------
# JSONL I/O
# ---------------------------------------------------------------------------

def read_dataset(path: Union[str, Path], num_classes: Optional[int] = None) -> Dataset:
    """Load a dataset from a JSONL file.

    Raises
    ------
    ValueError
        On a malformed line or a dimensionality mismatch (the message names
        the 1-based line number), or when the file holds no examples.
    """
    path = Path(path)
    examples: List[Example] = []
    input_dim: Optional[int] = None

    with path.open(encoding="utf-8") as f:
        for line_num, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                example = Example.from_record(json.loads(line))
            except Exception as e:
                raise ValueError(f"{path}: error parsing line {line_num}: {e}") from e
            if input_dim is None:
                input_dim = len(example.features)
            elif len(example.features) != input_dim:
                raise ValueError(
                    f"{path}: line {line_num} has {len(example.features)} features, "
                    f"expected {input_dim}"
                )
            examples.append(example)

    if not examples:
        raise ValueError(f"{path}: empty dataset")
    logger.debug("[Dataset] Read %d examples from %s", len(examples), path)
    return Dataset(examples, num_classes=num_classes)


def write_dataset(dataset: Dataset, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        for ex in dataset.examples:
            f.write(json.dumps(ex.to_record(), separators=(",", ":")))
            f.write("\n")
    return path
