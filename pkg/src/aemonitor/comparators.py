"""Baseline models used for operating-characteristic comparisons.

Two published approaches are reimplemented behind the same decision
surface as the partition model:

* a random relative-risk meta-analysis over two-arm studies (Poisson
  counts, per-study Gamma control rate and log-normal relative risk,
  flat hyperpriors), fit by Metropolis-within-Gibbs, here tagged CAI;
* a blinded monitoring model for the pooled current-study count given a
  background rate from a log-normal meta-analysis of historical control
  arms, with a uniform prior on the probability that an event comes from
  the treated arm, here tagged MUK. Its one-dimensional posterior is
  evaluated on a deterministic grid by default.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data_model import Active, DataError, Dataset, Placebo

# flat hyperprior bounds of the relative-risk meta-analysis
CAI_MU_BOUND = 1e6
CAI_SIGMA_BOUND = 1e6
CAI_ALPHA_BOUND = 1e6
CAI_BETA_BOUND = 1e6

# flat hyperprior bounds of the background meta-analysis
META_MU_BOUND = 1000.0
META_SIGMA_BOUND = 100.0


@dataclass(frozen=True)
class TwoArmStudy:
    """Per-study control (index 0) and treated (index 1) count/exposure."""

    study_id: str
    y0: int
    t0: float
    y1: int
    t1: float

    def __post_init__(self) -> None:
        if not (self.t0 > 0 and self.t1 > 0):
            raise DataError(f"study {self.study_id!r}: exposures must be positive")
        if self.y0 < 0 or self.y1 < 0:
            raise DataError(f"study {self.study_id!r}: counts must be nonnegative")


def two_arm_view(ds: Dataset) -> list[TwoArmStudy]:
    """Collapse an unblinded dataset to one control and one pooled treated arm per study.

    The current study comes first. Active arms within a study are pooled by
    summing counts and exposures.
    """
    if ds.blinded:
        raise DataError("two-arm view needs the unblinded dataset")
    order: list[str] = [ds.current_study_id]
    for u in ds.units:
        if u.study_id not in order:
            order.append(u.study_id)
    out = []
    for sid in order:
        units = [u for u in ds.units if u.study_id == sid]
        ctl = [u for u in units if isinstance(u.intervention, Placebo)]
        trt = [u for u in units if isinstance(u.intervention, Active)]
        if not ctl or not trt:
            raise DataError(f"study {sid!r} lacks a control or treated arm")
        out.append(TwoArmStudy(
            study_id=sid,
            y0=sum(u.y for u in ctl), t0=sum(u.t for u in ctl),
            y1=sum(u.y for u in trt), t1=sum(u.t for u in trt),
        ))
    return out


# ---------------------------------------------------------------------------
# Random relative-risk meta-analysis (CAI)


@dataclass(frozen=True)
class CaiDraws:
    """Posterior draws: per-study control rates and log relative risks."""

    xi: np.ndarray       # (n_draws, J) control-arm rates
    tau: np.ndarray      # (n_draws, J) log relative risks
    mu: np.ndarray
    sigma: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray

    @property
    def n_draws(self) -> int:
        return self.xi.shape[0]

    @property
    def n_studies(self) -> int:
        return self.xi.shape[1]


def fit_cai(studies: Sequence[TwoArmStudy], *, iterations: int = 4000,
            burn_in: int = 1000, seed: int = 0, walk_scale: float = 0.5,
            fix_tau: float | None = None,
            fix_hyper: tuple[float, float, float, float] | None = None) -> CaiDraws:
    """Metropolis-within-Gibbs sampler for the relative-risk meta-analysis.

    Control rates are conjugate Gibbs draws; log relative risks use normal
    random walks; the normal mean is a truncated-normal Gibbs draw; the
    normal scale and the Gamma shape use log-scale random walks; the Gamma
    rate is a conjugate Gibbs draw. ``fix_tau`` pins every log relative
    risk and ``fix_hyper`` pins (alpha, beta, mu, sigma); both exist so the
    conjugate special case can be checked exactly.
    """
    if len(studies) < 2:
        raise DataError("need at least two studies")
    rng = np.random.default_rng(seed)
    n_st = len(studies)
    y0 = np.array([s.y0 for s in studies], dtype=float)
    t0 = np.array([s.t0 for s in studies], dtype=float)
    y1 = np.array([s.y1 for s in studies], dtype=float)
    t1 = np.array([s.t1 for s in studies], dtype=float)

    if fix_hyper is not None:
        alpha, beta, mu, sigma = fix_hyper
    else:
        alpha, beta, mu, sigma = 1.0, 1.0, 0.0, 1.0
    tau = np.zeros(n_st) if fix_tau is None else np.full(n_st, fix_tau)
    xi = (y0 + y1) / (t0 + t1)
    xi = np.maximum(xi, 1e-12)

    n_kept = iterations - burn_in
    out_xi = np.empty((n_kept, n_st))
    out_tau = np.empty((n_kept, n_st))
    out_mu = np.empty(n_kept)
    out_sigma = np.empty(n_kept)
    out_alpha = np.empty(n_kept)
    out_beta = np.empty(n_kept)

    def tau_log_target(j: int, value: float) -> float:
        return (y1[j] * value - t1[j] * xi[j] * math.exp(value)
                - (value - mu) ** 2 / (2.0 * sigma * sigma))

    for it in range(iterations):
        # control rates: conjugate given the relative risks
        for j in range(n_st):
            xi[j] = rng.gamma(alpha + y0[j] + y1[j],
                              1.0 / (beta + t0[j] + t1[j] * math.exp(tau[j])))
        # log relative risks: random walk
        if fix_tau is None:
            for j in range(n_st):
                prop = tau[j] + walk_scale * rng.standard_normal()
                if math.log(rng.random()) < tau_log_target(j, prop) - tau_log_target(j, tau[j]):
                    tau[j] = prop
        if fix_hyper is None:
            # normal mean: truncated-normal Gibbs
            while True:
                mu_prop = rng.normal(float(tau.mean()), sigma / math.sqrt(n_st))
                if abs(mu_prop) < CAI_MU_BOUND:
                    mu = mu_prop
                    break
            # normal scale: log random walk
            ss = float(((tau - mu) ** 2).sum())
            sigma_prop = sigma * math.exp(walk_scale * rng.standard_normal())
            if sigma_prop < CAI_SIGMA_BOUND:
                cur = -n_st * math.log(sigma) - ss / (2.0 * sigma * sigma)
                new = -n_st * math.log(sigma_prop) - ss / (2.0 * sigma_prop * sigma_prop)
                if math.log(rng.random()) < new - cur + math.log(sigma_prop) - math.log(sigma):
                    sigma = sigma_prop
            # Gamma rate: conjugate under the flat prior
            while True:
                beta_prop = rng.gamma(n_st * alpha + 1.0, 1.0 / float(xi.sum()))
                if beta_prop < CAI_BETA_BOUND:
                    beta = beta_prop
                    break
            # Gamma shape: log random walk
            slx = float(np.log(xi).sum())
            alpha_prop = alpha * math.exp(walk_scale * rng.standard_normal())
            if alpha_prop < CAI_ALPHA_BOUND:
                cur = n_st * (alpha * math.log(beta) - math.lgamma(alpha)) + alpha * slx
                new = n_st * (alpha_prop * math.log(beta) - math.lgamma(alpha_prop)) + alpha_prop * slx
                if math.log(rng.random()) < new - cur + math.log(alpha_prop) - math.log(alpha):
                    alpha = alpha_prop
        if it >= burn_in:
            kept = it - burn_in
            out_xi[kept] = xi
            out_tau[kept] = tau
            out_mu[kept] = mu
            out_sigma[kept] = sigma
            out_alpha[kept] = alpha
            out_beta[kept] = beta
    return CaiDraws(out_xi, out_tau, out_mu, out_sigma, out_alpha, out_beta)


def cai_event_probs(draws: CaiDraws, delta: float) -> tuple[float, float]:
    """Reporting probabilities: treated arm versus pooled reference and versus control.

    The reference in the first probability averages the current control arm
    and both arms of every historical study (2J - 1 terms).
    """
    n_st = draws.n_studies
    theta_trt = draws.xi[:, 0] * np.exp(draws.tau[:, 0])
    ref_terms = draws.xi[:, 0].copy()
    for j in range(1, n_st):
        ref_terms = ref_terms + draws.xi[:, j] + draws.xi[:, j] * np.exp(draws.tau[:, j])
    reference = ref_terms / (2 * n_st - 1)
    pi2 = float(np.mean(theta_trt > reference + delta))
    pi3 = float(np.mean(theta_trt > draws.xi[:, 0] + delta))
    return pi2, pi3


# ---------------------------------------------------------------------------
# Background meta-analysis and blinded monitoring model (MUK)


def fit_background_meta(controls: Sequence[tuple[int, float]], *,
                        iterations: int = 4000, burn_in: int = 1000,
                        seed: int = 0, walk_scale: float = 0.5) -> float:
    """Background rate from historical control arms.

    Log rates are exchangeable normal with flat hyperpriors; the result is
    the average of the per-arm posterior mean rates.
    """
    if len(controls) < 2:
        raise DataError("need at least two historical control arms")
    rng = np.random.default_rng(seed)
    y = np.array([c[0] for c in controls], dtype=float)
    t = np.array([c[1] for c in controls], dtype=float)
    n_arm = len(controls)

    lam = np.log(np.maximum(y, 0.5) / t)     # log rates, zero counts floored
    mu = float(lam.mean())
    sigma = 1.0

    def lam_log_target(j: int, value: float) -> float:
        return (y[j] * value - t[j] * math.exp(value)
                - (value - mu) ** 2 / (2.0 * sigma * sigma))

    rate_sums = np.zeros(n_arm)
    n_kept = iterations - burn_in
    for it in range(iterations):
        for j in range(n_arm):
            prop = lam[j] + walk_scale * rng.standard_normal()
            if math.log(rng.random()) < lam_log_target(j, prop) - lam_log_target(j, lam[j]):
                lam[j] = prop
        while True:
            mu_prop = rng.normal(float(lam.mean()), sigma / math.sqrt(n_arm))
            if abs(mu_prop) < META_MU_BOUND:
                mu = mu_prop
                break
        ss = float(((lam - mu) ** 2).sum())
        sigma_prop = sigma * math.exp(walk_scale * rng.standard_normal())
        if sigma_prop < META_SIGMA_BOUND:
            cur = -n_arm * math.log(sigma) - ss / (2.0 * sigma * sigma)
            new = -n_arm * math.log(sigma_prop) - ss / (2.0 * sigma_prop * sigma_prop)
            if math.log(rng.random()) < new - cur + math.log(sigma_prop) - math.log(sigma):
                sigma = sigma_prop
        if it >= burn_in:
            rate_sums += np.exp(lam)
    return float((rate_sums / n_kept).mean())


@dataclass(frozen=True)
class MukPosterior:
    """Posterior over the treated-event probability p, on a fixed grid."""

    p_grid: np.ndarray
    weights: np.ndarray
    exposure_ratio: float     # k = treated / control exposure
    background_rate: float
    y_total: int
    t_total: float

    def risk_ratio(self, p: np.ndarray | float):
        """r = p / (k (1 - p)); equals 1 at p = k / (1 + k)."""
        return p / (self.exposure_ratio * (1.0 - p))

    def prob_risk_exceeds(self, threshold: float) -> float:
        """Posterior mass with the risk ratio strictly above a threshold."""
        # r is increasing in p: invert the threshold once
        ck = threshold * self.exposure_ratio
        p_star = ck / (1.0 + ck)
        return float(self.weights[self.p_grid > p_star].sum())

    def sample_mh(self, n_draws: int = 20_000, seed: int = 0,
                  walk_scale: float = 0.8, burn_in: int = 2000) -> np.ndarray:
        """Random-walk (logit scale) sampler over p; used to cross-check the grid."""
        rng = np.random.default_rng(seed)
        k = self.exposure_ratio

        def log_target(p: float) -> float:
            r = p / (k * (1.0 - p))
            mean = self.background_rate * self.t_total * (r * k + 1.0) / (k + 1.0)
            # includes the logit-transform Jacobian
            return self.y_total * math.log(mean) - mean + math.log(p * (1.0 - p))

        x = 0.0
        out = np.empty(n_draws)
        kept = 0
        total = n_draws + burn_in
        for it in range(total):
            x_prop = x + walk_scale * rng.standard_normal()
            p_cur = 1.0 / (1.0 + math.exp(-x))
            p_prop = 1.0 / (1.0 + math.exp(-x_prop))
            if math.log(rng.random()) < log_target(p_prop) - log_target(p_cur):
                x = x_prop
            if it >= burn_in:
                out[kept] = 1.0 / (1.0 + math.exp(-x))
                kept += 1
        return out


def fit_blinded_muk(y_total: int, t_total: float, exposure_ratio: float,
                    background_rate: float, *, n_grid: int = 10_000) -> MukPosterior:
    """Deterministic grid posterior for the blinded monitoring model.

    The pooled count is Poisson with mean proportional to (r k + 1)/(k + 1)
    where r is the treated-to-control risk ratio implied by p; p gets a
    uniform prior on (0, 1).
    """
    if not (t_total > 0 and exposure_ratio > 0 and background_rate > 0):
        raise ValueError("exposure, exposure ratio and background rate must be positive")
    p = (np.arange(n_grid) + 0.5) / n_grid
    r = p / (exposure_ratio * (1.0 - p))
    mean = background_rate * t_total * (r * exposure_ratio + 1.0) / (exposure_ratio + 1.0)
    log_w = y_total * np.log(mean) - mean
    log_w -= log_w.max()
    w = np.exp(log_w)
    w /= w.sum()
    return MukPosterior(p_grid=p, weights=w, exposure_ratio=exposure_ratio,
                        background_rate=background_rate, y_total=int(y_total),
                        t_total=float(t_total))


def muk_unblind_prob(posterior: MukPosterior, delta: float) -> float:
    """Probability that the implied treated rate exceeds background plus delta."""
    return posterior.prob_risk_exceeds(1.0 + delta / posterior.background_rate)
