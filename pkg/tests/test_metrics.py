import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fewmol.metrics import roc_auc


def pair_count_auc(labels, scores) -> float:
    """Brute-force oracle: wins plus half-ties over all positive/negative pairs."""
    pos = [s for y, s in zip(labels, scores) if y == 1]
    neg = [s for y, s in zip(labels, scores) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


def test_perfect_ranking():
    assert roc_auc([1, 1, 0], [0.9, 0.8, 0.1]) == 1.0


def test_inverted_ranking():
    assert roc_auc([1, 0], [0.1, 0.9]) == 0.0


def test_tie_counts_half():
    assert roc_auc([1, 0], [0.5, 0.5]) == 0.5


def test_single_class_rejected():
    with pytest.raises(ValueError):
        roc_auc([1, 1], [0.2, 0.3])


def test_exact_match_with_pair_counting_all_patterns():
    """Every label pattern for n <= 8, random scores: bitwise-equal to the oracle."""
    rng = np.random.default_rng(42)
    for n in range(2, 9):
        scores = rng.integers(0, 4, size=n) / 4.0  # coarse grid forces ties
        for bits in itertools.product([0, 1], repeat=n):
            if all(b == 0 for b in bits) or all(b == 1 for b in bits):
                continue
            assert roc_auc(list(bits), scores) == pair_count_auc(bits, scores)


@settings(max_examples=200, deadline=None)
@given(
    labels=st.lists(st.integers(0, 1), min_size=2, max_size=12).filter(lambda ls: 0 < sum(ls) < len(ls)),
    data=st.data(),
)
def test_matches_pair_counting_on_random_inputs(labels, data):
    scores = data.draw(
        st.lists(
            st.floats(allow_nan=False, allow_infinity=False, width=32),
            min_size=len(labels),
            max_size=len(labels),
        )
    )
    assert roc_auc(labels, scores) == pair_count_auc(labels, scores)
