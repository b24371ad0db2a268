"""Decision probabilities and threshold rules for safety monitoring.

Three posterior probabilities drive the workflow. Under blinding, the
pooled current-study rate is compared against a similarity-weighted
average of the external units' rates; after unblinding, the treatment
arms are compared against the weighted non-treatment units and against
the trial's own control arm. Each probability is checked against a
decision threshold; crossing the first recommends unblinding, crossing
either of the others recommends a safety report.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from .data_model import Dataset, Unit
from .similarity import SimilarityParams, pairwise_similarity

REPORTING_RULES = ("E2", "E3", "E2-or-E3")


class IncomparableFocusError(ValueError):
    """A focus unit has zero similarity to every reference unit."""


@dataclass(frozen=True)
class DecisionConfig:
    """Margin delta plus the three decision thresholds.

    ``delta`` is the minimum meaningful rate difference (events per
    person-day) added to the reference before comparison; it has no
    default and must be chosen explicitly.
    """

    delta: float
    lambda1: float | None = None
    lambda2: float | None = None
    lambda3: float | None = None
    reporting_rule: str = "E2-or-E3"

    def __post_init__(self) -> None:
        if self.delta < 0:
            raise ValueError("delta must be nonnegative")
        for name in ("lambda1", "lambda2", "lambda3"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.reporting_rule not in REPORTING_RULES:
            raise ValueError(f"reporting_rule must be one of {REPORTING_RULES}")


@dataclass(frozen=True)
class DecisionReport:
    """Outcome of the threshold rules, JSON-serializable."""

    blinded: bool
    delta: float
    pi1: float | None = None
    pi2: float | None = None
    pi3: float | None = None
    lambda1: float | None = None
    lambda2: float | None = None
    lambda3: float | None = None
    reporting_rule: str = "E2-or-E3"
    unblind_recommended: bool | None = None
    report_by_background: bool | None = None
    report_by_control: bool | None = None
    report_recommended: bool | None = None
    background_rate: float | None = None
    weight_tables: Mapping[str, Any] | None = None
    provenance: Mapping[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {k: v for k, v in self.__dict__.items()}
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# Similarity-based reference weights


def reference_weights(simmat: np.ndarray, focus: Sequence[int],
                      reference: Sequence[int]) -> np.ndarray:
    """Row-normalized similarity weights from focus units to reference units.

    Raises :class:`IncomparableFocusError` when a focus unit has zero total
    similarity to the whole reference set; silently falling back to uniform
    weights would hide that the unit cannot be compared.
    """
    if len(reference) == 0:
        raise ValueError("reference set is empty")
    if len(focus) == 0:
        raise ValueError("focus set is empty")
    rows = simmat[np.ix_(list(focus), list(reference))].astype(float)
    totals = rows.sum(axis=1)
    for i, tot in enumerate(totals):
        if tot <= 0.0:
            raise IncomparableFocusError(
                f"focus unit index {focus[i]} has zero similarity to the reference set")
    return rows / totals[:, None]


def event_probability(theta: np.ndarray, focus: Sequence[int], delta: float, *,
                      reference: Sequence[int] | None = None,
                      weights: np.ndarray | None = None,
                      control: Sequence[int] | None = None) -> float:
    """Posterior probability that the focus mean rate exceeds a reference plus delta.

    With ``reference``/``weights``, the comparison value in each draw is the
    average over focus units of their weighted reference rates. With
    ``control``, it is the plain mean over the control units. Ties at
    exactly the margin do not count as exceedances.
    """
    focus = list(focus)
    if not focus:
        raise ValueError("focus set is empty")
    focus_mean = theta[:, focus].mean(axis=1)
    if control is not None:
        control = list(control)
        if not control:
            raise ValueError("control set is empty")
        ref_val = theta[:, control].mean(axis=1)
    else:
        if reference is None or weights is None:
            raise ValueError("need either control or reference-plus-weights")
        reference = list(reference)
        ref_val = (theta[:, reference] @ weights.T).mean(axis=1)
    return float(np.mean(focus_mean > ref_val + delta))


def blinded_event_probability(ds: Dataset, theta: np.ndarray,
                              params: SimilarityParams, simmat: np.ndarray,
                              delta: float) -> float:
    """Unblinding probability on a blinded fit (current unit versus the rest)."""
    focus = ds.current_indices()
    reference = ds.historical_indices()
    w = reference_weights(simmat, focus, reference)
    return event_probability(theta, focus, delta, reference=reference, weights=w)


def unblinded_event_probabilities(ds: Dataset, theta: np.ndarray,
                                  simmat: np.ndarray, delta: float) -> tuple[float, float]:
    """Treatment-versus-background and treatment-versus-control probabilities."""
    trt = ds.treatment_indices()
    if not trt:
        raise ValueError("current study has no treatment-arm units")
    others = [i for i in range(ds.n_units) if i not in set(trt)]
    w = reference_weights(simmat, trt, others)
    pi2 = event_probability(theta, trt, delta, reference=others, weights=w)
    ctl = ds.control_indices()
    pi3 = event_probability(theta, trt, delta, control=ctl)
    return pi2, pi3


# ---------------------------------------------------------------------------
# Threshold rules


def decide(cfg: DecisionConfig, *, blinded: bool,
           pi1: float | None = None, pi2: float | None = None,
           pi3: float | None = None, background_rate: float | None = None,
           weight_tables: Mapping[str, Any] | None = None,
           provenance: Mapping[str, Any] | None = None) -> DecisionReport:
    """Apply the configured thresholds to the supplied probabilities."""
    unblind = report_bg = report_ctl = report = None
    if blinded:
        if pi1 is None:
            raise ValueError("blinded decision requires the unblinding probability")
        if cfg.lambda1 is None:
            raise ValueError("blinded decision requires lambda1")
        unblind = pi1 > cfg.lambda1
    else:
        need2 = cfg.reporting_rule in ("E2", "E2-or-E3")
        need3 = cfg.reporting_rule in ("E3", "E2-or-E3")
        if need2:
            if pi2 is None or cfg.lambda2 is None:
                raise ValueError("reporting rule needs pi2 and lambda2")
            report_bg = pi2 > cfg.lambda2
        if need3:
            if pi3 is None or cfg.lambda3 is None:
                raise ValueError("reporting rule needs pi3 and lambda3")
            report_ctl = pi3 > cfg.lambda3
        if cfg.reporting_rule == "E2":
            report = report_bg
        elif cfg.reporting_rule == "E3":
            report = report_ctl
        else:
            report = bool(report_bg or report_ctl)
    return DecisionReport(
        blinded=blinded, delta=cfg.delta,
        pi1=pi1, pi2=pi2, pi3=pi3,
        lambda1=cfg.lambda1, lambda2=cfg.lambda2, lambda3=cfg.lambda3,
        reporting_rule=cfg.reporting_rule,
        unblind_recommended=unblind,
        report_by_background=report_bg,
        report_by_control=report_ctl,
        report_recommended=report,
        background_rate=background_rate,
        weight_tables=weight_tables,
        provenance=dict(provenance or {}),
    )


# ---------------------------------------------------------------------------
# Pre-trial background rate


def pretrial_background(theta_hat: Sequence[float],
                        historical_units: Sequence[Unit],
                        planned_covariates: Sequence[Mapping[str, Any]],
                        params: SimilarityParams) -> float:
    """Design-stage background rate from historical estimates.

    ``theta_hat`` are posterior mean rates for the historical units (fit
    without any current-study data); weights come from similarity over the
    shared eligibility covariates (restrict ``params`` accordingly), and the
    result averages the weighted rates over the planned current units.
    """
    if len(theta_hat) != len(historical_units):
        raise ValueError("theta_hat must align with historical_units")
    if not planned_covariates:
        raise ValueError("no planned units supplied")
    theta_hat = np.asarray(theta_hat, dtype=float)
    total = 0.0
    for planned in planned_covariates:
        sims = np.array([
            pairwise_similarity(planned, h.covariates, params)
            for h in historical_units
        ])
        denom = sims.sum()
        if denom <= 0.0:
            raise IncomparableFocusError(
                "a planned unit has zero eligibility similarity to all historical units")
        total += float((sims / denom) @ theta_hat)
    return total / len(planned_covariates)


def eligibility_params(ds: Dataset) -> SimilarityParams:
    """Similarity parameters restricted to the dataset's eligibility covariates."""
    if not ds.eligibility_names:
        raise ValueError("dataset declares no eligibility covariates")
    return SimilarityParams(ds.schema, weights=dict(ds.eligibility_weights) or None,
                            subset=tuple(ds.eligibility_names))
