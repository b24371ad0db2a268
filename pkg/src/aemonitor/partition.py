"""Partition prior: cluster-size cohesion times cluster similarity.

The prior over set partitions multiplies, per cluster, a Chinese-restaurant
cohesion ``M * (size - 1)!`` with the cluster's average pairwise covariate
similarity. Everything is evaluated in log space. An exhaustive enumerator
over small unit counts serves as the oracle for sampler tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .data_model import Dataset
from .similarity import SimilarityParams, cluster_similarity_from_matrix, similarity_matrix

# Bell(12) = 4,213,597 partitions; enumeration beyond that is refused.
MAX_ENUMERATION_UNITS = 12


@dataclass(frozen=True)
class Partition:
    """A set partition in canonical (restricted-growth) labelling."""

    labels: tuple[int, ...]

    @staticmethod
    def from_labels(labels) -> "Partition":
        """Canonicalize arbitrary cluster labels to first-appearance order."""
        mapping: dict = {}
        out = []
        for lab in labels:
            if lab not in mapping:
                mapping[lab] = len(mapping)
            out.append(mapping[lab])
        return Partition(tuple(out))

    @property
    def n_clusters(self) -> int:
        return max(self.labels) + 1 if self.labels else 0

    def blocks(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in range(self.n_clusters)]
        for i, lab in enumerate(self.labels):
            out[lab].append(i)
        return out

    def sizes(self) -> list[int]:
        return [len(b) for b in self.blocks()]


@dataclass(frozen=True)
class PriorConfig:
    """Total mass of the cohesion plus the similarity parameters."""

    total_mass: float
    params: SimilarityParams

    def __post_init__(self) -> None:
        if not self.total_mass > 0:
            raise ValueError("total mass must be positive")


def log_cohesion(size: int, total_mass: float) -> float:
    """log of M * (size - 1)!, via log-gamma so large clusters do not overflow."""
    if size < 1:
        raise ValueError("cluster size must be at least 1")
    return math.log(total_mass) + math.lgamma(size)


def log_partition_prior_from_matrix(partition: Partition, simmat: np.ndarray,
                                    total_mass: float) -> float:
    """Unnormalized log prior of a partition given a similarity matrix."""
    total = 0.0
    for block in partition.blocks():
        g = cluster_similarity_from_matrix(block, simmat)
        if g <= 0.0:
            return -math.inf
        total += log_cohesion(len(block), total_mass) + math.log(g)
    return total


def log_partition_prior(partition: Partition, ds: Dataset, cfg: PriorConfig) -> float:
    """Unnormalized log prior of a partition of the dataset's units."""
    if len(partition.labels) != ds.n_units:
        raise ValueError("partition does not cover the dataset's units")
    simmat = similarity_matrix(ds, cfg.params)
    return log_partition_prior_from_matrix(partition, simmat, cfg.total_mass)


def enumerate_partitions(n_units: int) -> Iterator[Partition]:
    """All set partitions of ``n_units`` items, each exactly once.

    Yields restricted-growth label strings in lexicographic order;
    refuses n above :data:`MAX_ENUMERATION_UNITS`.
    """
    if n_units < 1:
        raise ValueError("need at least one unit")
    if n_units > MAX_ENUMERATION_UNITS:
        raise ValueError(
            f"enumeration limited to {MAX_ENUMERATION_UNITS} units; got {n_units}")

    labels = [0] * n_units

    def grow(i: int, n_used: int) -> Iterator[Partition]:
        if i == n_units:
            yield Partition(tuple(labels))
            return
        for lab in range(n_used + 1):
            labels[i] = lab
            yield from grow(i + 1, max(n_used, lab + 1))

    yield from grow(1, 1)


def bell_number(n: int) -> int:
    """Number of set partitions of n items (triangle recurrence)."""
    row = [1]
    for _ in range(n - 1):
        nxt = [row[-1]]
        for v in row:
            nxt.append(nxt[-1] + v)
        row = nxt
    return row[0] if n > 0 else 1
