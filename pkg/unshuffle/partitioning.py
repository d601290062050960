"""
Partitioning - split a training set into disjoint training environments.

Strategies:

* ``metadata``   - group by a metadata field (e.g. a ground-truth question type),
                   then deal the groups into E balanced environments.
* ``clustering`` - binary bag-of-words, spherical k-means into K clusters,
                   then deal the clusters into E < K environments.
* ``random``     - uniform random split (sanity baseline).
* ``forms``      - E full-size copies of the data, copy e using the e-th
                   equivalent form of each example where one exists.
* ``dataset_id`` - one environment per source dataset.

The Rand index compares two partitions of the same examples.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from sklearn.feature_extraction.text import CountVectorizer
from sklearn.metrics import rand_score
from sklearn.metrics.pairwise import cosine_similarity
from sklearn.preprocessing import normalize

from unshuffle.dataset import Dataset, Example

logger = logging.getLogger(__name__)

STRATEGIES = ("metadata", "clustering", "random", "forms", "augment", "dataset_id", "none")
INDEX_STRATEGIES = ("metadata", "clustering", "random", "dataset_id")


# ---------------------------------------------------------------------------
# Environment partition
# ---------------------------------------------------------------------------

@dataclass
class EnvironmentPartition:
    """E disjoint, non-empty index sets whose union is ``range(n)``.

    ``clusters`` keeps the cluster (or group) id of every example when the
    environments were dealt from clusters; it is not serialized.
    """

    env_indices: List[np.ndarray]
    strategy: str
    seed: Optional[int] = None
    n: Optional[int] = None
    clusters: Optional[np.ndarray] = field(default=None, compare=False, repr=False)

    def __post_init__(self) -> None:
        self.env_indices = [np.sort(np.asarray(idx, dtype=np.int64)) for idx in self.env_indices]
        if not self.env_indices:
            raise ValueError("a partition needs at least one environment")
        total = sum(idx.size for idx in self.env_indices)
        if self.n is None:
            self.n = total
        for e, idx in enumerate(self.env_indices):
            if idx.size == 0:
                raise ValueError(f"environment {e} is empty")
        merged = np.concatenate(self.env_indices)
        if total != self.n or not np.array_equal(np.sort(merged), np.arange(self.n)):
            counts = np.bincount(merged, minlength=self.n) if merged.min() >= 0 else None
            duplicated = [] if counts is None else np.flatnonzero(counts > 1).tolist()[:10]
            raise ValueError(
                f"environments must be disjoint and cover [0, {self.n}); "
                f"got {total} indices, duplicated={duplicated}"
            )

    @property
    def num_envs(self) -> int:
        return len(self.env_indices)

    def sizes(self) -> List[int]:
        return [int(idx.size) for idx in self.env_indices]

    def labels(self) -> np.ndarray:
        """Environment id of every example."""
        out = np.empty(self.n, dtype=np.int64)  # type: ignore[arg-type]
        for e, idx in enumerate(self.env_indices):
            out[idx] = e
        return out

    def subsets(self, dataset: Dataset) -> List[Dataset]:
        if len(dataset) != self.n:
            raise ValueError(f"partition covers {self.n} examples, dataset has {len(dataset)}")
        return [dataset.subset(idx) for idx in self.env_indices]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "strategy": self.strategy,
            "seed": self.seed,
            "envs": [idx.tolist() for idx in self.env_indices],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "EnvironmentPartition":
        unknown = set(data) - {"strategy", "seed", "envs"}
        if unknown:
            raise ValueError(f"unknown partition fields {sorted(unknown)}")
        return cls(env_indices=data["envs"], strategy=data["strategy"], seed=data.get("seed"))

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "EnvironmentPartition":
        with Path(path).open(encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


def partition_summary(partition: EnvironmentPartition, dataset: Dataset) -> pd.DataFrame:
    """Size and label histogram of every environment."""
    rows = []
    for e, env in enumerate(partition.subsets(dataset)):
        row: Dict[str, Any] = {"env": e, "size": len(env)}
        for c, count in enumerate(env.label_counts()):
            row[f"label_{c}"] = int(count) if not dataset.multi_hot else float(count)
        rows.append(row)
    return pd.DataFrame(rows)


# ---------------------------------------------------------------------------
# Bag of words
# ---------------------------------------------------------------------------

@dataclass
class BowVocabulary:
    """Retained tokens (lexicographic order) with their document counts."""

    tokens: List[str]
    counts: List[int]
    min_count: int

    def index(self) -> Dict[str, int]:
        return {token: i for i, token in enumerate(self.tokens)}


def bow_vectorize(token_lists: Sequence[Sequence[str]], min_count: int = 10) -> Tuple[BowVocabulary, np.ndarray]:
    """Binary bag-of-words over tokens present in at least ``min_count`` examples."""
    if len(token_lists) == 0:
        raise ValueError("cannot vectorize an empty corpus")
    if min_count < 1:
        raise ValueError(f"min_count must be >= 1, got {min_count}")
    vectorizer = CountVectorizer(
        analyzer=lambda tokens: list(tokens),
        binary=True,
        min_df=min_count,
        lowercase=False,
    )
    try:
        matrix = vectorizer.fit_transform(token_lists)
    except ValueError as e:
        # sklearn refuses when nothing survives the document-frequency cut
        raise ValueError(f"empty vocabulary after filtering with min_count={min_count}") from e
    tokens = list(vectorizer.get_feature_names_out())
    if not tokens:
        raise ValueError(f"empty vocabulary after filtering with min_count={min_count}")
    dense = np.asarray(matrix.todense(), dtype=np.float64)
    counts = dense.sum(axis=0).astype(np.int64).tolist()
    return BowVocabulary(tokens=tokens, counts=counts, min_count=min_count), dense


# ---------------------------------------------------------------------------
# Spherical k-means
# ---------------------------------------------------------------------------

@dataclass
class ClusterAssignment:
    labels: np.ndarray
    centroids: np.ndarray
    num_clusters: int
    objective_trace: List[float] = field(default_factory=list)
    n_iter: int = 0

    def sizes(self) -> List[int]:
        return np.bincount(self.labels, minlength=self.num_clusters).tolist()


def _farthest_first(unit: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    chosen = [int(rng.integers(unit.shape[0]))]
    best_sim = unit @ unit[chosen[0]]
    for _ in range(1, k):
        candidate = int(np.argmin(best_sim))
        chosen.append(candidate)
        best_sim = np.maximum(best_sim, unit @ unit[candidate])
    return unit[chosen].copy()


def kmeans_cosine(vectors: np.ndarray, K: int, seed: int, max_iters: int = 100) -> ClusterAssignment:
    """Spherical k-means: cosine assignment, normalized-mean centroids.

    All-zero rows cannot be normalized; they are put in an overflow cluster
    with id ``K``.  The objective (sum of cosine similarities of points to
    their centroid) never decreases between iterations.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    n = vectors.shape[0]
    if K < 2:
        raise ValueError(f"K must be >= 2, got {K}")
    if max_iters < 1:
        raise ValueError(f"max_iters must be >= 1, got {max_iters}")
    if K > n:
        raise ValueError(f"K={K} exceeds the number of examples n={n}")
    zero_rows = ~np.any(vectors != 0.0, axis=1)
    active = np.flatnonzero(~zero_rows)
    if active.size < K:
        raise ValueError(f"K={K} exceeds the {active.size} non-zero rows")

    unit = normalize(vectors[active])
    rng = np.random.default_rng(seed)
    centroids = _farthest_first(unit, K, rng)
    labels: Optional[np.ndarray] = None
    trace: List[float] = []
    rows = np.arange(active.size)
    n_iter = 0

    for n_iter in range(1, max_iters + 1):
        sims = cosine_similarity(unit, centroids)
        new_labels = np.argmax(sims, axis=1)
        trace.append(float(sims[rows, new_labels].sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels

        point_sims = sims[rows, labels]
        reseeded: List[int] = []
        for k in range(K):
            members = labels == k
            if not np.any(members):
                # empty cluster: restart it on the point least similar to its centroid
                order = np.argsort(point_sims, kind="stable")
                candidate = next(int(i) for i in order if int(i) not in reseeded)
                reseeded.append(candidate)
                centroids[k] = unit[candidate]
                continue
            mean = unit[members].sum(axis=0)
            norm = np.linalg.norm(mean)
            if norm > 0.0:
                centroids[k] = mean / norm
        logger.debug("[KMeans] iteration %d objective=%.6f", n_iter, trace[-1])
    else:
        # budget ran out right after an update: labels must match the returned centroids
        sims = cosine_similarity(unit, centroids)
        labels = np.argmax(sims, axis=1)
        trace.append(float(sims[rows, labels].sum()))

    all_labels = np.full(n, K, dtype=np.int64)
    all_labels[active] = labels
    num_clusters = K + 1 if zero_rows.any() else K
    logger.info(
        "[KMeans] K=%d converged after %d iteration(s), objective=%.4f, overflow=%d",
        K,
        n_iter,
        trace[-1] if trace else 0.0,
        int(zero_rows.sum()),
    )
    return ClusterAssignment(
        labels=all_labels,
        centroids=centroids,
        num_clusters=num_clusters,
        objective_trace=trace,
        n_iter=n_iter,
    )


# ---------------------------------------------------------------------------
# Clusters to environments
# ---------------------------------------------------------------------------

def assign_clusters_to_envs(cluster_sizes: Sequence[int], E: int, seed: int) -> List[List[Tuple[int, int]]]:
    """Deal shuffled clusters into E balanced bins, splitting clusters as needed.

    Returns, for every environment, the ``(cluster, count)`` pieces it
    receives.  Bin capacities are ``n // E`` or ``n // E + 1``.
    """
    sizes = [int(s) for s in cluster_sizes]
    n = sum(sizes)
    if E < 1:
        raise ValueError(f"E must be >= 1, got {E}")
    if E > n:
        raise ValueError(f"E={E} exceeds the number of examples n={n}")
    if any(s < 0 for s in sizes):
        raise ValueError("cluster sizes must be non-negative")

    capacities = [n // E + (1 if b < n % E else 0) for b in range(E)]
    order = np.random.default_rng(seed).permutation(len(sizes))
    bins: List[List[Tuple[int, int]]] = [[] for _ in range(E)]
    b = 0
    room = capacities[0]
    for cluster in order:
        remaining = sizes[int(cluster)]
        while remaining > 0:
            if room == 0:
                b += 1
                room = capacities[b]
            take = min(room, remaining)
            bins[b].append((int(cluster), take))
            room -= take
            remaining -= take
    return bins


def _partition_from_clusters(
    cluster_labels: np.ndarray, num_clusters: int, E: int, seed: int, strategy: str
) -> EnvironmentPartition:
    members = [np.flatnonzero(cluster_labels == c) for c in range(num_clusters)]
    rng = np.random.default_rng(seed)
    # split clusters by prefixes of a seeded shuffle
    members = [rng.permutation(m) for m in members]
    cursors = [0] * num_clusters
    envs: List[List[int]] = []
    for pieces in assign_clusters_to_envs([m.size for m in members], E, seed):
        env: List[int] = []
        for cluster, count in pieces:
            start = cursors[cluster]
            env.extend(members[cluster][start : start + count].tolist())
            cursors[cluster] = start + count
        envs.append(env)
    return EnvironmentPartition(
        env_indices=envs, strategy=strategy, seed=seed, n=int(cluster_labels.size), clusters=cluster_labels
    )


# ---------------------------------------------------------------------------
# Strategies
# ---------------------------------------------------------------------------

def _metadata_value(example: Example, key: str) -> Optional[str]:
    if key not in ("group", "dataset_id"):
        raise ValueError(f"unsupported metadata key {key!r}; use 'group' or 'dataset_id'")
    return getattr(example, key)


def partition_by_metadata(dataset: Dataset, key: str, E: int, seed: int) -> EnvironmentPartition:
    values = [_metadata_value(ex, key) for ex in dataset.examples]
    missing = [i for i, v in enumerate(values) if v is None]
    if missing:
        raise ValueError(f"examples missing metadata {key!r}: {missing}")
    groups = sorted(set(values))  # type: ignore[type-var]
    group_id = {g: i for i, g in enumerate(groups)}
    labels = np.asarray([group_id[v] for v in values], dtype=np.int64)
    partition = _partition_from_clusters(labels, len(groups), E, seed, "metadata")
    logger.info("[Partition] metadata %r: %d groups -> sizes %s", key, len(groups), partition.sizes())
    return partition


def partition_by_clustering(
    dataset: Dataset,
    K: int,
    E: int,
    seed: int,
    min_count: int = 10,
    max_iters: int = 100,
) -> EnvironmentPartition:
    if E >= K:
        raise ValueError(f"clustering needs E < K, got E={E}, K={K}")
    missing = [i for i, ex in enumerate(dataset.examples) if ex.tokens is None]
    if missing:
        raise ValueError(f"examples missing tokens: {missing}")
    _, matrix = bow_vectorize([ex.tokens for ex in dataset.examples], min_count=min_count)  # type: ignore[misc]
    clusters = kmeans_cosine(matrix, K, seed, max_iters=max_iters)
    partition = _partition_from_clusters(clusters.labels, clusters.num_clusters, E, seed, "clustering")
    logger.info("[Partition] clustering K=%d -> sizes %s", K, partition.sizes())
    return partition


def partition_random(dataset: Union[Dataset, int], E: int, seed: int) -> EnvironmentPartition:
    n = dataset if isinstance(dataset, int) else len(dataset)
    if not 1 <= E <= n:
        raise ValueError(f"E must lie in [1, {n}], got {E}")
    order = np.random.default_rng(seed).permutation(n)
    return EnvironmentPartition(
        env_indices=[order[e::E] for e in range(E)], strategy="random", seed=seed, n=n
    )


def partition_by_forms(dataset: Dataset, E: int) -> List[Dataset]:
    """E full-size datasets; copy e swaps in form e-1 of every example that has one."""
    if E < 2:
        raise ValueError(f"forms environments need E >= 2, got {E}")
    too_many = [i for i, ex in enumerate(dataset.examples) if len(ex.forms or []) > E - 1]
    if too_many:
        raise ValueError(f"examples with more than {E - 1} forms would lose forms: {too_many}")
    envs = [dataset]
    for e in range(1, E):
        examples = []
        for ex in dataset.examples:
            forms = ex.forms or []
            if len(forms) >= e:
                examples.append(
                    Example(
                        features=list(forms[e - 1]),
                        label=ex.label,
                        group=ex.group,
                        dataset_id=ex.dataset_id,
                    )
                )
            else:
                examples.append(ex)
        envs.append(Dataset(examples, num_classes=dataset.num_classes))
    return envs


def augment_with_forms(dataset: Dataset) -> Dataset:
    """Data-augmentation baseline: originals followed by every alternative form."""
    extra = [
        Example(features=list(form), label=ex.label, group=ex.group, dataset_id=ex.dataset_id)
        for ex in dataset.examples
        for form in (ex.forms or [])
    ]
    return Dataset(dataset.examples + extra, num_classes=dataset.num_classes)


def partition_by_dataset_id(datasets: Sequence[Dataset]) -> Tuple[Dataset, EnvironmentPartition]:
    if len(datasets) < 2:
        raise ValueError(f"need at least 2 datasets, got {len(datasets)}")
    combined = Dataset.concat(datasets)
    bounds = np.cumsum([0] + [len(ds) for ds in datasets])
    envs = [np.arange(bounds[i], bounds[i + 1]) for i in range(len(datasets))]
    return combined, EnvironmentPartition(env_indices=envs, strategy="dataset_id", n=len(combined))


# ---------------------------------------------------------------------------
# Rand index
# ---------------------------------------------------------------------------

PartitionLike = Union[EnvironmentPartition, Sequence[int], np.ndarray]


def _as_labels(part: PartitionLike) -> np.ndarray:
    if isinstance(part, EnvironmentPartition):
        return part.labels()
    return np.asarray(part)


def rand_index(part_a: PartitionLike, part_b: PartitionLike) -> float:
    """Fraction of example pairs on which the two partitions agree."""
    a, b = _as_labels(part_a), _as_labels(part_b)
    if a.shape != b.shape:
        raise ValueError(f"partitions cover different sizes: {a.size} vs {b.size}")
    if a.size < 2:
        raise ValueError("the Rand index needs at least 2 examples")
    return float(rand_score(a, b))


def group_rand_index(partition: EnvironmentPartition, dataset: Dataset, key: str = "group") -> Optional[float]:
    """Rand index of the partition's clusters (its environments if it has none) against a metadata field.

    ``None`` when some example lacks the field.
    """
    values = [_metadata_value(ex, key) for ex in dataset.examples]
    if len(values) < 2 or any(v is None for v in values):
        return None
    found = partition.clusters if partition.clusters is not None else partition.labels()
    return rand_index(found, np.asarray(values))


# ---------------------------------------------------------------------------
# Dispatcher
# ---------------------------------------------------------------------------

def index_partition(
    strategy: str,
    datasets: Sequence[Dataset],
    E: int = 1,
    seed: int = 0,
    K: Optional[int] = None,
    key: str = "group",
    min_count: int = 10,
) -> Tuple[Dataset, EnvironmentPartition]:
    """Pooled training set and its partition, for the strategies that split by index."""
    if strategy == "dataset_id":
        return partition_by_dataset_id(datasets)
    pooled = datasets[0] if len(datasets) == 1 else Dataset.concat(datasets)
    if strategy == "metadata":
        return pooled, partition_by_metadata(pooled, key, E, seed)
    if strategy == "clustering":
        if K is None:
            raise ValueError("clustering needs K")
        return pooled, partition_by_clustering(pooled, K, E, seed, min_count=min_count)
    if strategy == "random":
        return pooled, partition_random(pooled, E, seed)
    raise ValueError(f"strategy {strategy!r} does not produce an index partition, expected one of {INDEX_STRATEGIES}")


def splits_by_index(strategy: str, E: int) -> bool:
    """Whether ``build_environments`` would go through ``index_partition``."""
    return strategy == "dataset_id" or (strategy in INDEX_STRATEGIES and E > 1)


def build_environments(
    strategy: str,
    datasets: Sequence[Dataset],
    E: int = 1,
    seed: int = 0,
    K: Optional[int] = None,
    key: str = "group",
    min_count: int = 10,
    partition: Optional[EnvironmentPartition] = None,
) -> List[Dataset]:
    """Training environments for a strategy.

    ``datasets`` holds one pooled training set, except for ``dataset_id``
    which takes one dataset per environment.  A precomputed ``partition``
    overrides the index-based strategies.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown partition strategy {strategy!r}, expected one of {STRATEGIES}")
    if strategy == "dataset_id":
        combined, part = partition_by_dataset_id(datasets)
        return part.subsets(combined)
    pooled = datasets[0] if len(datasets) == 1 else Dataset.concat(datasets)
    if partition is not None:
        return partition.subsets(pooled)
    if strategy == "augment":
        return [augment_with_forms(pooled)]
    if strategy == "forms":
        return partition_by_forms(pooled, E)
    if not splits_by_index(strategy, E):
        return [pooled]
    _, part = index_partition(strategy, [pooled], E=E, seed=seed, K=K, key=key, min_count=min_count)
    return part.subsets(pooled)
