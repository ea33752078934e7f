"""Tests for the round-granularity abstract model and its brute-force verifier."""

import pytest
from hypothesis import given, settings, strategies as st

from lockstep.oracle import (
    Counterexample,
    abstract_round,
    enumerate_and_verify,
    full_matrix,
    matrix_from_missing,
    run_abstract,
    sample_and_verify,
    verify_sequence,
)
from lockstep.platoon import ServiceLevel, min_level_decide
from lockstep.protocol import is_default

HIGH = ServiceLevel.HIGH


def high_state(n):
    return (HIGH,) * n


def test_abstract_round_all_delivered():
    decisions, sent = abstract_round(high_state(3), full_matrix(3), min_level_decide, high_state(3))
    assert decisions == (HIGH, HIGH, HIGH)
    assert sent == (HIGH, HIGH, HIGH)


def test_abstract_round_single_missing_link_splits_once():
    e = matrix_from_missing(2, [(2, 1)])  # vehicle 1 misses vehicle 2
    decisions, sent = abstract_round(high_state(2), e, min_level_decide, high_state(2))
    assert is_default(decisions[0]) and decisions[1] == HIGH
    assert is_default(sent[0]) and sent[1] == HIGH


def test_abstract_round_flushes_default_next_round():
    e = matrix_from_missing(2, [(2, 1)])
    _, sent = abstract_round(high_state(2), e, min_level_decide, high_state(2))
    decisions, sent2 = abstract_round(sent, full_matrix(2), min_level_decide, high_state(2))
    assert all(is_default(d) for d in decisions)  # everyone sees the gossiped default
    assert sent2 == (HIGH, HIGH)


def test_run_abstract_recovery_timeline():
    n = 2
    matrices = [full_matrix(n), matrix_from_missing(n, [(2, 1)]), full_matrix(n), full_matrix(n)]
    decisions = run_abstract(n, matrices, min_level_decide, high_state(n))
    assert decisions[0] == (HIGH, HIGH)
    assert is_default(decisions[1][0]) and decisions[1][1] == HIGH
    assert all(is_default(d) for d in decisions[2])
    assert decisions[3] == (HIGH, HIGH)


def test_enumerate_n2_all_patterns_pass():
    report = enumerate_and_verify(2, 3, min_level_decide, high_state(2))
    assert report.passed
    assert report.patterns_checked == 64


def test_enumerate_rejects_oversized_space():
    with pytest.raises(ValueError):
        enumerate_and_verify(3, 4, min_level_decide, high_state(3))


def test_mutant_without_default_write_is_caught():
    report = enumerate_and_verify(2, 3, min_level_decide, high_state(2),
                                  drop_default_write=True)
    assert not report.passed
    assert isinstance(report.counterexample, Counterexample)
    assert report.counterexample.rule == "one-round-uncertainty"


def test_all_false_matrices_stay_uniformly_default():
    n = 4
    dead = tuple(tuple(i == j for i in range(n)) for j in range(n))
    assert verify_sequence(n, [dead] * 5, min_level_decide, high_state(n)) is None
    decisions = run_abstract(n, [dead] * 5, min_level_decide, high_state(n))
    for row in decisions:
        assert all(is_default(d) for d in row)


def test_sampled_verification_reproducible():
    a = sample_and_verify(8, 50, 300, seed=11, decide=min_level_decide,
                          read_state=high_state(8))
    b = sample_and_verify(8, 50, 300, seed=11, decide=min_level_decide,
                          read_state=high_state(8))
    assert a.passed and b.passed
    assert a.to_json() == b.to_json()


def test_sampled_verification_catches_mutant():
    report = sample_and_verify(4, 20, 500, seed=5, decide=min_level_decide,
                               read_state=high_state(4), drop_default_write=True)
    assert not report.passed


@st.composite
def matrix_pairs(draw):
    """A random matrix sequence plus a pointwise superset of it."""
    n = draw(st.integers(min_value=2, max_value=4))
    rounds = draw(st.integers(min_value=1, max_value=4))
    seqs = []
    sups = []
    for _ in range(rounds):
        base = []
        sup = []
        for j in range(n):
            row_b, row_s = [], []
            for i in range(n):
                if i == j:
                    row_b.append(True)
                    row_s.append(True)
                else:
                    b = draw(st.booleans())
                    row_b.append(b)
                    row_s.append(b or draw(st.booleans()))
            base.append(tuple(row_b))
            sup.append(tuple(row_s))
        seqs.append(tuple(base))
        sups.append(tuple(sup))
    return n, seqs, sups


@settings(max_examples=200)
@given(matrix_pairs())
def test_relay_monotonicity(case):
    """More delivery never flips a decided value, only resolves defaults."""
    n, base, sup = case
    d_base = run_abstract(n, base, min_level_decide, high_state(n))
    d_sup = run_abstract(n, sup, min_level_decide, high_state(n))
    for row_b, row_s in zip(d_base, d_sup):
        for b, s in zip(row_b, row_s):
            if not is_default(b):
                assert b == s
