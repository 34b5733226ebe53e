"""Synthetic classification tasks over token sequences.

parity
    label = number of "marked" tokens mod 2 (0 to 3 marked tokens per sequence).
majority
    three disjoint token groups; label = group with the most occurrences.
pattern
    label = whether a fixed bigram occurs anywhere in the sequence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError

TASK_NAMES = ("parity", "majority", "pattern")


@dataclass
class LabeledDataset:
    tokens: np.ndarray  # (n, m) int
    labels: np.ndarray  # (n,) int
    n_classes: int

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.tokens[idx], self.labels[idx], self.n_classes)


@dataclass
class Task:
    name: str
    train: LabeledDataset
    eval: LabeledDataset

    @property
    def n_classes(self) -> int:
        return self.train.n_classes


def _parity(n, m, vocab, rng):
    marked = np.arange(1, 5)
    plain = np.arange(5, vocab)
    tokens = rng.choice(plain, size=(n, m))
    counts = rng.integers(0, 4, size=n)
    for i, c in enumerate(counts):
        pos = rng.choice(m, size=c, replace=False)
        tokens[i, pos] = rng.choice(marked, size=c)
    return tokens, counts % 2, 2


def _majority(n, m, vocab, rng):
    usable = np.arange(1, vocab)
    groups = np.array_split(usable[: 3 * (len(usable) // 3)], 3)
    tokens = np.empty((n, m), dtype=np.int64)
    labels = rng.integers(0, 3, size=n)
    for i, lab in enumerate(labels):
        while True:
            probs = np.full(3, 0.2)
            probs[lab] = 0.6
            which = rng.choice(3, size=m, p=probs)
            counts = np.bincount(which, minlength=3)
            if counts[lab] > np.delete(counts, lab).max():
                break
        tokens[i] = [rng.choice(groups[g]) for g in which]
    return tokens, labels, 3


def _pattern(n, m, vocab, rng):
    first, second = 1, 2
    labels = rng.integers(0, 2, size=n)
    tokens = rng.integers(1, vocab, size=(n, m))
    for i, lab in enumerate(labels):
        row = tokens[i]
        # break every accidental occurrence, then plant one for positives
        hits = np.nonzero((row[:-1] == first) & (row[1:] == second))[0]
        row[hits + 1] = rng.integers(3, vocab, size=len(hits))
        if lab:
            p = rng.integers(0, m - 1)
            row[p], row[p + 1] = first, second
    return tokens, labels, 2


_MAKERS = {"parity": _parity, "majority": _majority, "pattern": _pattern}


def make_task(name: str, m: int, vocab: int, n_train: int = 512, n_eval: int = 256,
              seed: int = 0) -> Task:
    if name not in _MAKERS:
        raise DataError(f"unknown task {name!r}; choose from {sorted(_MAKERS)}")
    rng = np.random.default_rng([seed, TASK_NAMES.index(name)])
    tokens, labels, c = _MAKERS[name](n_train + n_eval, m, vocab, rng)
    tokens = np.asarray(tokens, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    full = LabeledDataset(tokens, labels, c)
    return Task(name, full.subset(slice(0, n_train)), full.subset(slice(n_train, None)))


def best_constant_accuracy(data: LabeledDataset) -> float:
    """Accuracy of the best single-class predictor, found by trying every class."""
    return max(float((data.labels == c).mean()) for c in range(data.n_classes))


def kshot_subsample(data: LabeledDataset, k: int, seed: int) -> LabeledDataset:
    """Exactly ``k`` examples per class, in original order."""
    rng = np.random.default_rng(seed)
    picked = []
    for c in range(data.n_classes):
        idx = np.nonzero(data.labels == c)[0]
        if len(idx) < k:
            raise DataError(f"class {c} has {len(idx)} examples, fewer than k={k}")
        picked.append(rng.choice(idx, size=k, replace=False))
    return data.subset(np.sort(np.concatenate(picked)))
