import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aemonitor.partition import (
    Partition,
    PriorConfig,
    bell_number,
    enumerate_partitions,
    log_cohesion,
    log_partition_prior,
    log_partition_prior_from_matrix,
)
from aemonitor.similarity import SimilarityParams

from oracles import crp_probabilities


def test_log_cohesion_values():
    assert log_cohesion(1, 2.0) == pytest.approx(math.log(2))
    assert log_cohesion(3, 2.0) == pytest.approx(math.log(4))
    assert log_cohesion(1, 10.0) == pytest.approx(math.log(10))
    with pytest.raises(ValueError):
        log_cohesion(0, 2.0)


def test_log_cohesion_large_sizes_finite():
    assert math.isfinite(log_cohesion(10 ** 6, 2.0))


def test_enumerate_counts():
    for n in (1, 2, 3, 4, 5, 6):
        assert len(list(enumerate_partitions(n))) == bell_number(n)
    assert bell_number(3) == 5
    assert bell_number(4) == 15
    assert bell_number(12) == 4_213_597


def test_enumerate_guard():
    with pytest.raises(ValueError, match="12"):
        list(enumerate_partitions(13))


def test_enumerate_unique_and_canonical():
    parts = list(enumerate_partitions(5))
    assert len({p.labels for p in parts}) == len(parts)
    for p in parts:
        assert p.labels[0] == 0
        for i in range(1, 5):
            assert p.labels[i] <= max(p.labels[:i]) + 1


def test_prior_identical_units_hand_values():
    """Three identical units: one cluster weighs M*2!, singletons M^3."""
    sim = np.ones((3, 3))
    one = Partition((0, 0, 0))
    three = Partition((0, 1, 2))
    lp_one = log_partition_prior_from_matrix(one, sim, 2.0)
    lp_three = log_partition_prior_from_matrix(three, sim, 2.0)
    assert lp_one == pytest.approx(math.log(4))
    assert lp_three == pytest.approx(3 * math.log(2))


def test_prior_zero_similarity_is_minus_inf():
    sim = np.eye(2)
    assert log_partition_prior_from_matrix(Partition((0, 0)), sim, 2.0) == -math.inf
    assert math.isfinite(log_partition_prior_from_matrix(Partition((0, 1)), sim, 2.0))


def test_prior_via_dataset_wrapper(case_dataset):
    cfg = PriorConfig(2.0, SimilarityParams(case_dataset.schema))
    labels = tuple(i % 3 for i in range(case_dataset.n_units))
    value = log_partition_prior(Partition(labels), case_dataset, cfg)
    assert math.isfinite(value)
    with pytest.raises(ValueError, match="cover"):
        log_partition_prior(Partition((0, 1)), case_dataset, cfg)


def test_crp_reduction():
    """All similarities 1: the normalized prior is the pure cohesion process."""
    for n in (3, 4, 5, 6):
        sim = np.ones((n, n))
        expected = crp_probabilities(n, 2.0)
        logs = {p.labels: log_partition_prior_from_matrix(p, sim, 2.0)
                for p in enumerate_partitions(n)}
        mx = max(logs.values())
        z = sum(math.exp(v - mx) for v in logs.values())
        for labels, lp in logs.items():
            assert math.exp(lp - mx) / z == pytest.approx(expected[labels], rel=1e-10)


def test_monotone_total_mass():
    """Larger total mass raises the prior-expected cluster count."""
    rng = np.random.default_rng(4)
    x = rng.random(6)
    sim = 1 - np.abs(x[:, None] - x[None, :])
    np.fill_diagonal(sim, 1.0)

    def expected_k(total_mass):
        logs = {p: log_partition_prior_from_matrix(p, sim, total_mass)
                for p in enumerate_partitions(6)}
        mx = max(logs.values())
        weights = {p: math.exp(v - mx) for p, v in logs.items()}
        z = sum(weights.values())
        return sum(p.n_clusters * w / z for p, w in weights.items())

    ks = [expected_k(m) for m in (0.5, 2.0, 10.0)]
    assert ks[0] < ks[1] < ks[2]


@settings(deadline=None, max_examples=50)
@given(st.lists(st.integers(0, 3), min_size=2, max_size=7))
def test_relabeling_invariance(raw_labels):
    """The prior depends on the set partition, not the label values."""
    rng = np.random.default_rng(11)
    n = len(raw_labels)
    x = rng.random(n)
    sim = 1 - 0.9 * np.abs(x[:, None] - x[None, :])
    np.fill_diagonal(sim, 1.0)
    canonical = Partition.from_labels(raw_labels)
    # an arbitrary relabeling: map label v to 7 - v, then canonicalize again
    shuffled = Partition.from_labels([7 - v for v in raw_labels])
    a = log_partition_prior_from_matrix(canonical, sim, 2.0)
    b = log_partition_prior_from_matrix(shuffled, sim, 2.0)
    assert a == pytest.approx(b, rel=1e-12)
