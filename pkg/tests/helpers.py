"""Small shared fixtures for the test suites."""

import os
import sys

import numpy as np

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from unshuffle.dataset import Dataset, Example


def toy_dataset(n=40, dim=3, seed=0, groups=None, num_classes=2):
    """Linearly separable-ish data: label = sign of the first feature."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, dim))
    y = (x[:, 0] > 0).astype(int)
    examples = []
    for i in range(n):
        group = groups[i % len(groups)] if groups else None
        examples.append(Example(features=x[i].tolist(), label=int(y[i]), group=group))
    return Dataset(examples, num_classes=num_classes)


def numeric_grad(fn, array, eps=1e-5):
    """Central finite differences of scalar ``fn()`` w.r.t. every entry of ``array`` (in place)."""
    grad = np.zeros_like(array)
    for idx in np.ndindex(*array.shape):
        original = array[idx]
        array[idx] = original + eps
        plus = fn()
        array[idx] = original - eps
        minus = fn()
        array[idx] = original
        grad[idx] = (plus - minus) / (2 * eps)
    return grad
