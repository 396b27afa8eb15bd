import itertools
import math

import numpy as np
import pytest

from oracles import collapse_ref, ctc_nll_ref
from qctc.ctc import (
    Vocab,
    ce_loss,
    collapse,
    enumerate_valid_paths,
    enumeration_loss,
    min_path_length,
    qctc_loss,
    qctc_loss_batch,
)
from qctc.errors import InfeasibleAlignmentError, UsageError
from qctc.numerics import grad_check, softmax

# Frozen oracle values: -log(1/3) and -log(3/4).
LN3 = 1.0986122886681098
NEG_LN_3_4 = 0.2876820724517809


def words_vocab():
    return Vocab.from_names(["-", "a", "bag", "on", "table"])


def test_collapse_sentence_examples():
    v = words_vocab()
    path1 = ["-", "a", "bag", "on", "a", "table"]
    path2 = ["a", "-", "bag", "bag", "-", "on", "a", "a", "table", "-"]
    for path in (path1, path2):
        out = collapse([v.token(w) for w in path], v)
        assert v.render(out) == ["a", "bag", "on", "a", "table"]


def test_collapse_small_cases(abc):
    a = abc.token("a")
    assert collapse([0, 0, 0], abc) == []
    assert collapse([a, a, 0, a], abc) == [a, a]
    assert collapse([], abc) == []


def test_collapse_round_trip_exhaustive():
    """Grouping all paths by their collapse reproduces enumerate_valid_paths exactly."""
    for d in range(2, 5):
        v = Vocab(d)
        for n in range(1, 7):
            groups = {}
            for path in itertools.product(range(d), repeat=n):
                y = collapse(path, v)
                assert y == collapse_ref(path)
                assert 0 not in y and min_path_length(y) <= n
                groups.setdefault(tuple(y), []).append(path)
            for y, paths in groups.items():
                assert enumerate_valid_paths(list(y), n, v) == paths


def test_enumerate_valid_paths_examples():
    v = Vocab(2)
    assert sorted(enumerate_valid_paths([1], 2, v)) == [(0, 1), (1, 0), (1, 1)]
    assert enumerate_valid_paths([1, 1], 3, v) == [(1, 0, 1)]
    assert enumerate_valid_paths([1, 1], 2, v) == []


def test_enumerate_valid_paths_respects_cap():
    with pytest.raises(UsageError):
        enumerate_valid_paths([1], 12, Vocab(10), cap=10**6)


@pytest.mark.parametrize("target,expected", [([1, 2, 3], 3), ([1, 1], 3), ([], 0), ([1, 1, 1, 2, 2], 8)])
def test_min_path_length(target, expected):
    assert min_path_length(target) == expected


def test_min_path_length_is_smallest_feasible_n():
    v = Vocab(3)
    for target in ([1], [1, 1], [1, 2, 1], [2, 2, 2]):
        m = min_path_length(target)
        assert enumerate_valid_paths(target, m, v)
        if m > 1:
            assert not enumerate_valid_paths(target, m - 1, v)


def test_qctc_loss_frozen_values():
    loss, _ = qctc_loss(np.zeros((1, 3)), [1], Vocab(3))
    assert loss == pytest.approx(LN3, abs=1e-12)
    loss, _ = qctc_loss(np.zeros((2, 2)), [1], Vocab(2))
    assert loss == pytest.approx(NEG_LN_3_4, abs=1e-12)


def test_qctc_uniform_logits_n_equals_t():
    v = Vocab(3)
    for target in ([1, 2], [2, 1, 2]):
        loss, _ = qctc_loss(np.zeros((len(target), 3)), target, v)
        assert loss == pytest.approx(len(target) * LN3, abs=1e-12)


def test_qctc_matches_independent_brute_force():
    rng = np.random.default_rng(11)
    for _ in range(40):
        d = int(rng.integers(2, 5))
        n = int(rng.integers(1, 6))
        t = int(rng.integers(0, min(n, 3) + 1))
        target = [int(x) for x in rng.integers(1, d, size=t)]
        if min_path_length(target) > n:
            continue
        logits = rng.normal(size=(n, d)) * 2
        loss, _ = qctc_loss(logits, target, Vocab(d))
        assert loss == pytest.approx(ctc_nll_ref(logits, target), abs=1e-9)
        assert enumeration_loss(logits, target, Vocab(d)) == pytest.approx(loss, abs=1e-9)


def test_qctc_goes_to_zero_with_confident_logits(abc):
    target = [1, 2]
    losses = []
    for m in (1.0, 5.0, 20.0, 50.0):
        logits = np.zeros((2, 4))
        logits[0, 1] = logits[1, 2] = m
        losses.append(qctc_loss(logits, target, abc)[0])
    assert all(a > b for a, b in zip(losses, losses[1:]))
    assert losses[-1] < 1e-20


def test_qctc_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    v = Vocab(3)
    logits = rng.normal(size=(4, 3))

    def f(x):
        loss, g = qctc_loss(x.reshape(4, 3), [1, 2], v)
        return loss, g.ravel()

    assert grad_check(f, logits.ravel()) < 1e-4


def test_gradient_is_softmax_minus_occupancy():
    rng = np.random.default_rng(4)
    logits = rng.normal(size=(5, 4))
    _, g = qctc_loss(logits, [1, 3], Vocab(4))
    occupancy = softmax(logits) - g
    np.testing.assert_allclose(occupancy.sum(axis=1), 1.0, atol=1e-12)
    assert occupancy.min() > -1e-12


def test_batch_matches_single_with_mixed_lengths():
    rng = np.random.default_rng(5)
    v = Vocab(5)
    logits = rng.normal(size=(3, 6, 5))
    targets = [[1], [2, 2, 3], []]
    losses, grads = qctc_loss_batch(logits, targets, v)
    for b, t in enumerate(targets):
        loss, g = qctc_loss(logits[b], t, v)
        assert losses[b] == pytest.approx(loss, abs=1e-12)
        np.testing.assert_allclose(grads[b], g, atol=1e-12)


def test_infeasible_target_names_sample():
    v = Vocab(3)
    with pytest.raises(InfeasibleAlignmentError) as info:
        qctc_loss_batch(np.zeros((2, 2, 3)), [[1], [1, 1]], v)
    assert info.value.sample_index == 1
    assert info.value.required == 3 and info.value.available == 2
    assert info.value.exit_code == 3


def test_targets_with_blank_or_out_of_range_are_rejected():
    with pytest.raises(UsageError):
        qctc_loss(np.zeros((3, 3)), [0, 1], Vocab(3))
    with pytest.raises(UsageError):
        qctc_loss(np.zeros((3, 3)), [3], Vocab(3))


def test_ce_penalizes_a_shift_that_qctc_tolerates(abc):
    target = [1, 2, 3]
    logits = np.full((4, 4), -4.0)
    for i, t in enumerate(target):
        logits[i, t] = 4.0
    logits[3, 0] = 4.0
    # the grid spells [a, b, c, -]; rolling it by one puts a blank first
    qctc, _ = qctc_loss(logits, target, abc)
    ce_aligned, _ = ce_loss(logits, target, abc)
    shifted_logits = np.roll(logits, 1, axis=0)
    ce_shift, _ = ce_loss(shifted_logits, target, abc)
    qctc_shift, _ = qctc_loss(shifted_logits, target, abc)
    assert ce_shift > qctc_shift
    assert ce_shift > ce_aligned + 5
    assert qctc_shift == pytest.approx(qctc, abs=1e-6)


def test_ce_gradient_matches_finite_differences(abc):
    rng = np.random.default_rng(6)
    logits = rng.normal(size=(4, 4))

    def f(x):
        loss, g = ce_loss(x.reshape(4, 4), [2, 1], abc)
        return loss, g.ravel()

    assert grad_check(f, logits.ravel()) < 1e-6


def test_vocab_round_trip_and_specials():
    v = words_vocab().with_bos_eos()
    assert Vocab.from_dict(v.to_dict()) == v
    assert v.render([v.bos_id, v.eos_id]) == ["<bos>", "<eos>"]
    with pytest.raises(UsageError):
        Vocab(1)
    with pytest.raises(UsageError):
        Vocab(3, blank_id=1)
