import numpy as np
import pytest

from ept.errors import DataError
from ept.tasks import TASK_NAMES, best_constant_accuracy, kshot_subsample, make_task


@pytest.mark.parametrize("name", TASK_NAMES)
def test_task_shapes_and_determinism(name):
    t = make_task(name, 16, 64, n_train=64, n_eval=32, seed=3)
    assert t.train.tokens.shape == (64, 16) and len(t.eval) == 32
    assert t.train.tokens.min() >= 1 and t.train.tokens.max() < 64
    again = make_task(name, 16, 64, n_train=64, n_eval=32, seed=3)
    assert np.array_equal(t.train.tokens, again.train.tokens)
    assert np.array_equal(t.eval.labels, again.eval.labels)
    other = make_task(name, 16, 64, n_train=64, n_eval=32, seed=4)
    assert not np.array_equal(t.train.tokens, other.train.tokens)


def test_parity_labels():
    t = make_task("parity", 16, 64, n_train=200, n_eval=0)
    marked = ((t.train.tokens >= 1) & (t.train.tokens <= 4)).sum(axis=1)
    assert np.array_equal(marked % 2, t.train.labels)


def test_majority_labels():
    t = make_task("majority", 16, 64, n_train=200, n_eval=0)
    groups = np.array_split(np.arange(1, 64)[:63], 3)
    for row, lab in zip(t.train.tokens, t.train.labels):
        counts = [np.isin(row, g).sum() for g in groups]
        assert int(np.argmax(counts)) == lab and sorted(counts)[-1] > sorted(counts)[-2]


def test_pattern_labels():
    t = make_task("pattern", 16, 64, n_train=200, n_eval=0)
    toks = t.train.tokens
    has = ((toks[:, :-1] == 1) & (toks[:, 1:] == 2)).any(axis=1)
    assert np.array_equal(has.astype(int), t.train.labels)


def test_unknown_task():
    with pytest.raises(DataError):
        make_task("sentiment", 16, 64)


def test_best_constant_accuracy_brute_force():
    t = make_task("majority", 16, 64, n_train=10, n_eval=90)
    counts = np.bincount(t.eval.labels, minlength=3)
    assert best_constant_accuracy(t.eval) == counts.max() / 90


def test_kshot_counts_and_determinism():
    t = make_task("majority", 16, 64, n_train=120, n_eval=10)
    sub = kshot_subsample(t.train, 4, seed=0)
    assert len(sub) == 12
    assert np.array_equal(np.bincount(sub.labels), [4, 4, 4])
    again = kshot_subsample(t.train, 4, seed=0)
    assert np.array_equal(sub.tokens, again.tokens)


def test_kshot_full_class_size_is_whole_split():
    t = make_task("pattern", 16, 64, n_train=40, n_eval=10)
    k = int(np.bincount(t.train.labels).min())
    t.train.labels[:] = np.arange(40) % 2  # balance classes
    sub = kshot_subsample(t.train, 20, seed=1)
    assert np.array_equal(sub.tokens, t.train.tokens)
    assert k <= 20


def test_kshot_too_few_names_class():
    t = make_task("majority", 16, 64, n_train=9, n_eval=0)
    with pytest.raises(DataError, match="class"):
        kshot_subsample(t.train, 50, seed=0)
