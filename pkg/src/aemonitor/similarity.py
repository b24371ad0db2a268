"""Pairwise and cluster-level covariate similarity.

Every score lives in [0, 1]. Per-covariate components depend on the
covariate kind; unit-level similarity is the weight-normalized average of
components over the covariates observed in *both* units, so missing
covariates never penalize a pair. Cluster similarity is the average of all
pairwise scores within the cluster, with singletons scoring 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Mapping, Sequence

import numpy as np

from .data_model import (
    Active,
    BlindedMixture,
    CovariateEntry,
    CovariateSchema,
    Dataset,
    Placebo,
    SchemaError,
    Unit,
)


class IncomparableUnitsError(ValueError):
    """Two units share no observed covariates and cannot be compared."""


@dataclass(frozen=True)
class SimilarityParams:
    """Schema plus optional weight overrides and covariate subsetting.

    ``subset`` restricts scoring to the named covariates (used both for
    reduced-covariate sensitivity runs and for eligibility-based weights);
    ``weights`` overrides the schema's relative weights by name.
    """

    schema: CovariateSchema
    weights: Mapping[str, float] | None = None
    subset: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        if self.weights:
            for name, w in self.weights.items():
                if not w > 0:
                    raise SchemaError(f"similarity weight for {name!r} must be positive")

    @property
    def entries(self) -> tuple[CovariateEntry, ...]:
        entries = self.schema.entries
        if self.subset is not None:
            wanted = set(self.subset)
            entries = tuple(e for e in entries if e.name in wanted)
        return entries

    def weight(self, name: str) -> float:
        if self.weights and name in self.weights:
            return float(self.weights[name])
        return self.schema[name].weight


def similarity_component(kind: str, x: Any, x_other: Any, *,
                         scale: float | None = None,
                         levels: int | None = None) -> float:
    """Per-covariate similarity for non-intervention kinds.

    continuous: exp(-(x - x')^2 / scale^2); binary: equality indicator;
    categorical-proportion: 1 - |x - x'|; ordinal: 1 - |x - x'| / levels;
    composite: 1, 1/2 or 0 for equal, overlapping or disjoint label sets.
    """
    if kind == "continuous":
        if scale is None or not scale > 0:
            raise SchemaError("continuous similarity needs a positive scale")
        d = float(x) - float(x_other)
        return math.exp(-(d * d) / (scale * scale))
    if kind == "binary":
        return 1.0 if x == x_other else 0.0
    if kind == "categorical-proportion":
        for v in (x, x_other):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"proportion {v!r} outside [0, 1]")
        return 1.0 - abs(float(x) - float(x_other))
    if kind == "ordinal":
        if levels is None or levels < 2:
            raise SchemaError("ordinal similarity needs the total level count")
        return 1.0 - abs(float(x) - float(x_other)) / levels
    if kind == "composite":
        a, b = frozenset(x), frozenset(x_other)
        if a == b:
            return 1.0
        if a & b:
            return 0.5
        return 0.0
    raise SchemaError(f"no similarity rule for covariate kind {kind!r}")


def _deterministic_intervention(code: Placebo | Active,
                                other: Placebo | Active,
                                ladders: Mapping[str, Sequence[float]]) -> float:
    if isinstance(code, Placebo) and isinstance(other, Placebo):
        return 1.0
    if isinstance(code, Active) and isinstance(other, Active):
        if code.drug != other.drug:
            return 0.0
        ladder = ladders.get(code.drug)
        if ladder is None:
            raise SchemaError(f"unknown drug {code.drug!r}")
        return 1.0 - abs(code.dose_level - other.dose_level) / len(ladder)
    return 0.0      # placebo versus active


def intervention_similarity(code, other, ladders: Mapping[str, Sequence[float]]) -> float:
    """Intervention similarity, taking expectations over blinded mixtures.

    Deterministic codes follow the placebo/same-drug/different-drug rule;
    a mixture argument averages the rule over its support, and two mixtures
    take the double expectation.
    """
    if isinstance(code, BlindedMixture) and isinstance(other, BlindedMixture):
        return sum(m1 * m2 * _deterministic_intervention(c1, c2, ladders)
                   for c1, m1 in code.components
                   for c2, m2 in other.components)
    if isinstance(code, BlindedMixture):
        return sum(m * _deterministic_intervention(c, other, ladders)
                   for c, m in code.components)
    if isinstance(other, BlindedMixture):
        return sum(m * _deterministic_intervention(code, c, ladders)
                   for c, m in other.components)
    return _deterministic_intervention(code, other, ladders)


def _component(entry: CovariateEntry, x: Any, x_other: Any) -> float:
    if entry.kind == "intervention":
        return intervention_similarity(x, x_other, entry.dose_ladders or {})
    return similarity_component(entry.kind, x, x_other,
                                scale=entry.scale, levels=entry.levels)


def pairwise_similarity(cov_u: Mapping[str, Any], cov_v: Mapping[str, Any],
                        params: SimilarityParams) -> float:
    """Weighted average of components over the jointly observed covariates."""
    num = 0.0
    den = 0.0
    for entry in params.entries:
        if entry.name not in cov_u or entry.name not in cov_v:
            continue
        w = params.weight(entry.name)
        num += w * _component(entry, cov_u[entry.name], cov_v[entry.name])
        den += w
    if den == 0.0:
        raise IncomparableUnitsError("units share no observed covariates")
    return num / den


def unit_similarity(u: Unit, v: Unit, params: SimilarityParams) -> float:
    return pairwise_similarity(u.covariates, v.covariates, params)


def cluster_similarity(units: Sequence[Unit] | Sequence[Mapping[str, Any]],
                       params: SimilarityParams) -> float:
    """Average pairwise similarity within a cluster; singletons score 1."""
    if len(units) == 0:
        raise ValueError("cluster is empty")
    covs = [u.covariates if isinstance(u, Unit) else u for u in units]
    n = len(covs)
    if n == 1:
        return 1.0
    total = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            total += pairwise_similarity(covs[i], covs[j], params)
    return total / (n * (n - 1) / 2)


def similarity_matrix(ds: Dataset, params: SimilarityParams | None = None) -> np.ndarray:
    """Symmetric unit-by-unit similarity matrix with unit diagonal."""
    if params is None:
        params = SimilarityParams(ds.schema)
    n = ds.n_units
    out = np.ones((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            s = unit_similarity(ds.units[i], ds.units[j], params)
            out[i, j] = s
            out[j, i] = s
    return out


def cluster_similarity_from_matrix(members: Sequence[int], simmat: np.ndarray) -> float:
    """Cluster similarity evaluated on a precomputed pairwise matrix."""
    n = len(members)
    if n == 0:
        raise ValueError("cluster is empty")
    if n == 1:
        return 1.0
    idx = np.asarray(members)
    sub = simmat[np.ix_(idx, idx)]
    total = float(np.triu(sub, 1).sum())
    return total / (n * (n - 1) / 2)
