"""
Datagen - synthetic multi-environment benchmarks.

``gen_spurious`` draws two Gaussian feature blocks.  The stable block is
equally predictive in every environment.  The sign of the spurious block
agrees with the label with an environment-specific probability, and that
agreement is reversed at test time.

``gen_token_groups`` draws token bags.  A group-specific "style" drives a
spurious label prior, and class-specific "content" tokens carry the stable
signal.  Some examples come with equivalent forms that keep the content and
rewrite the style; each form index can carry its own style-to-label
agreement, so environments built from forms disagree on the style.
"""

import logging
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from scipy.stats import norm

from unshuffle.dataset import Dataset, Example

logger = logging.getLogger(__name__)


def _from_dict(cls, data: Dict[str, Any]):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} fields {sorted(unknown)}")
    return cls(**data)


# ---------------------------------------------------------------------------
# Gaussian stable / spurious blocks
# ---------------------------------------------------------------------------

@dataclass
class SpuriousSpec:
    d_stable: int = 5
    d_spur: int = 5
    mu_stable: float = 1.0
    mu_spur: float = 1.0
    sigma: float = 1.0
    env_agreement: List[float] = field(default_factory=lambda: [0.9, 0.8])
    test_agreement: float = 0.1
    n_per_env: int = 2000
    n_val: int = 1000
    n_test: int = 2000

    def validate(self) -> None:
        for name in ("d_stable", "d_spur", "n_per_env", "n_val", "n_test"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"SpuriousSpec.{name} must be >= 1, got {getattr(self, name)}")
        for name in ("mu_stable", "mu_spur", "sigma"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"SpuriousSpec.{name} must be > 0, got {getattr(self, name)}")
        if len(self.env_agreement) < 2:
            raise ValueError("SpuriousSpec.env_agreement needs one probability per environment, E >= 2")
        for e, p in enumerate(self.env_agreement):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"SpuriousSpec.env_agreement[{e}] must lie in [0, 1], got {p}")
        if not 0.0 <= self.test_agreement <= 1.0:
            raise ValueError(f"SpuriousSpec.test_agreement must lie in [0, 1], got {self.test_agreement}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SpuriousSpec":
        return _from_dict(cls, data)


def stable_bayes_accuracy(spec: SpuriousSpec) -> float:
    """Accuracy of the Bayes-optimal classifier that reads only the stable block."""
    return float(norm.cdf(np.sqrt(spec.d_stable) * spec.mu_stable / spec.sigma))


def _spurious_examples(
    spec: SpuriousSpec,
    rng: np.random.Generator,
    agreements: np.ndarray,
    groups: List[str],
) -> List[Example]:
    n = agreements.size
    y = rng.integers(0, 2, size=n)
    sign = 2.0 * y - 1.0
    agree = np.where(rng.random(n) < agreements, 1.0, -1.0)
    stable = sign[:, None] * spec.mu_stable + spec.sigma * rng.standard_normal((n, spec.d_stable))
    spur = (agree * sign)[:, None] * spec.mu_spur + spec.sigma * rng.standard_normal((n, spec.d_spur))
    features = np.hstack([stable, spur])
    return [
        Example(features=features[i].tolist(), label=int(y[i]), group=groups[i])
        for i in range(n)
    ]


def gen_spurious(spec: SpuriousSpec, seed: int) -> Tuple[List[Dataset], Dataset, Dataset]:
    """Training environments, an in-distribution validation set and an OOD test set."""
    spec.validate()
    rng = np.random.default_rng(seed)
    envs = []
    for e, p in enumerate(spec.env_agreement):
        examples = _spurious_examples(
            spec, rng, np.full(spec.n_per_env, p), [f"env{e}"] * spec.n_per_env
        )
        envs.append(Dataset(examples, num_classes=2))

    # validation mixes the training environments uniformly
    picks = rng.integers(0, len(spec.env_agreement), size=spec.n_val)
    val = Dataset(
        _spurious_examples(
            spec, rng, np.asarray(spec.env_agreement)[picks], [f"env{e}" for e in picks]
        ),
        num_classes=2,
    )
    test = Dataset(
        _spurious_examples(spec, rng, np.full(spec.n_test, spec.test_agreement), ["test"] * spec.n_test),
        num_classes=2,
    )
    logger.info(
        "[Datagen] spurious benchmark: %d env(s) x %d, val=%d, test=%d",
        len(envs),
        spec.n_per_env,
        len(val),
        len(test),
    )
    return envs, val, test


# ---------------------------------------------------------------------------
# Token groups with equivalent forms
# ---------------------------------------------------------------------------

@dataclass
class TokenGroupsConfig:
    n: int = 3000
    num_groups: int = 6
    style_vocab: int = 8
    style_tokens: int = 4
    content_vocab: int = 6
    content_tokens: int = 2
    content_purity: float = 0.8
    group_skew: float = 0.4
    fraction_with_forms: float = 0.174
    max_forms: int = 3
    invert_group_prior: bool = False
    resample_style: bool = False
    # per form index: probability that the rewritten style favours the example's label
    form_style_agreement: Optional[List[float]] = None

    def validate(self) -> None:
        for name in ("n", "num_groups", "style_vocab", "style_tokens", "content_vocab", "content_tokens", "max_forms"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"TokenGroupsConfig.{name} must be >= 1, got {getattr(self, name)}")
        if self.style_tokens > self.style_vocab:
            raise ValueError("TokenGroupsConfig.style_tokens must not exceed style_vocab")
        if self.content_tokens > self.content_vocab:
            raise ValueError("TokenGroupsConfig.content_tokens must not exceed content_vocab")
        if not 0.5 <= self.content_purity <= 1.0:
            raise ValueError(f"TokenGroupsConfig.content_purity must lie in [0.5, 1], got {self.content_purity}")
        if not 0.0 <= self.group_skew <= 0.5:
            raise ValueError(f"TokenGroupsConfig.group_skew must lie in [0, 0.5], got {self.group_skew}")
        if not 0.0 <= self.fraction_with_forms <= 1.0:
            raise ValueError(
                f"TokenGroupsConfig.fraction_with_forms must lie in [0, 1], got {self.fraction_with_forms}"
            )
        if self.fraction_with_forms > 0.0 and self.num_groups < 2:
            raise ValueError("equivalent forms need at least 2 groups to rewrite the style")
        if self.form_style_agreement is not None:
            if len(self.form_style_agreement) != self.max_forms:
                raise ValueError(
                    f"TokenGroupsConfig.form_style_agreement needs one value per form ({self.max_forms}), "
                    f"got {len(self.form_style_agreement)}"
                )
            for k, p in enumerate(self.form_style_agreement):
                if not 0.0 <= p <= 1.0:
                    raise ValueError(f"TokenGroupsConfig.form_style_agreement[{k}] must lie in [0, 1], got {p}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TokenGroupsConfig":
        return _from_dict(cls, data)


def token_vocabulary(config: TokenGroupsConfig) -> List[str]:
    """Fixed feature order: content tokens per class, then style tokens per group."""
    content = [f"c{label}_{j}" for label in (0, 1) for j in range(config.content_vocab)]
    style = [f"g{g}_s{j}" for g in range(config.num_groups) for j in range(config.style_vocab)]
    return content + style


def _group_prior(config: TokenGroupsConfig, group: int) -> float:
    skew = config.group_skew if group % 2 == 0 else -config.group_skew
    if config.invert_group_prior:
        skew = -skew
    return 0.5 + skew


class _TokenSampler:
    def __init__(self, config: TokenGroupsConfig, rng: np.random.Generator) -> None:
        self.config = config
        self.rng = rng
        self.index = {token: i for i, token in enumerate(token_vocabulary(config))}

    def content(self, label: int) -> List[str]:
        tokens = []
        picks = self.rng.choice(self.config.content_vocab, size=self.config.content_tokens, replace=False)
        for j in picks:
            source = label if self.rng.random() < self.config.content_purity else 1 - label
            tokens.append(f"c{source}_{int(j)}")
        return tokens

    def style(self, group: int) -> List[str]:
        picks = self.rng.choice(self.config.style_vocab, size=self.config.style_tokens, replace=False)
        return [f"g{group}_s{int(j)}" for j in sorted(picks)]

    def form_group(self, group: int, label: int, form_index: int) -> int:
        """Style group of a rewrite: never the example's own group."""
        config = self.config
        agreement = config.form_style_agreement
        if agreement is None or config.group_skew == 0.0:
            other = int(self.rng.integers(config.num_groups - 1))
            return other if other < group else other + 1
        others = [g for g in range(config.num_groups) if g != group]
        favour = [g for g in others if (_group_prior(config, g) > 0.5) == (label == 1)]
        oppose = [g for g in others if g not in favour]
        pool = favour if self.rng.random() < agreement[form_index] else oppose
        return int(self.rng.choice(pool or others))

    def encode(self, tokens: List[str]) -> List[float]:
        vector = np.zeros(len(self.index))
        vector[[self.index[t] for t in tokens]] = 1.0
        return vector.tolist()


def gen_token_groups(config: TokenGroupsConfig, seed: int) -> Dataset:
    """Token-bag dataset with group metadata, token lists and equivalent forms."""
    config.validate()
    rng = np.random.default_rng(seed)
    sampler = _TokenSampler(config, rng)
    with_forms = set(
        rng.choice(config.n, size=int(round(config.fraction_with_forms * config.n)), replace=False).tolist()
    )

    examples = []
    for i in range(config.n):
        group = int(rng.integers(config.num_groups))
        label = int(rng.random() < _group_prior(config, group))
        content = sampler.content(label)
        style_group = int(rng.integers(config.num_groups)) if config.resample_style else group
        tokens = content + sampler.style(style_group)

        forms: Optional[List[List[float]]] = None
        if i in with_forms:
            forms = []
            for k in range(int(rng.integers(1, config.max_forms + 1))):
                other = sampler.form_group(group, label, k)
                forms.append(sampler.encode(content + sampler.style(other)))

        examples.append(
            Example(
                features=sampler.encode(tokens),
                label=label,
                group=f"g{group}",
                forms=forms,
                tokens=tokens,
            )
        )

    logger.info(
        "[Datagen] token groups: n=%d, groups=%d, with forms=%d",
        config.n,
        config.num_groups,
        len(with_forms),
    )
    return Dataset(examples, num_classes=2)


def token_groups_splits(
    config: TokenGroupsConfig, seed: int, n_val: int, n_test: int
) -> Tuple[List[Dataset], Dataset, Dataset]:
    """Training set, in-distribution validation set and an OOD test set.

    The test set inverts the group prior and draws style independently of the
    group, so style carries no label information there.
    """
    train_set = gen_token_groups(config, seed)
    val = gen_token_groups(replace(config, n=n_val), seed + 1)
    test = gen_token_groups(
        replace(config, n=n_test, invert_group_prior=True, resample_style=True, fraction_with_forms=0.0),
        seed + 2,
    )
    return [train_set], val, test
