"""Scenario simulation, operating characteristics, threshold calibration.

A scenario assigns each layout unit a hypothetical incidence rate; a
replicate draws Poisson counts for every unit, runs the blinded analysis,
and, when unblinding is recommended, the unblinded analysis. Tallies over
replicates give the frequency of the unblinding event and of the combined
unblind-and-report event. Thresholds are calibrated as empirical order
statistics of the per-replicate probabilities under a calibration
scenario, so target error rates hold by construction.

Replicates are independent: every random ingredient of replicate ``i``
derives from ``SeedSequence((master_seed, i, stream))``, so fanning out
over any number of workers reproduces the single-process tallies exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from functools import partial
from multiprocessing import Pool
from typing import Mapping, Sequence

import numpy as np

from . import comparators, decision
from .data_model import DataError, Dataset, Placebo, to_blinded
from .inference import Hyperparams, McmcConfig, run_chain_arrays
from .similarity import SimilarityParams, similarity_matrix

PPMX_METHODS = ("PPMx", "PPMx-L")
ALL_METHODS = ("PPMx", "PPMx-L", "MUK", "CAI")

# covariates dropped by the reduced-covariate sensitivity variant
PPMX_L_DROPPED = ("stgAge", "Sex")

# Frozen margin used by the simulation presets (events per person-day).
# Tuned once against the bundled scenarios so that calibrated runs land in
# the documented power bands; see README for the calibration protocol.
DEFAULT_SIM_DELTA = 1.75e-4

# RNG stream offsets: data generation is shared by all methods within a
# replicate; each method's samplers get their own streams.
_STREAM_DATA = 0
_METHOD_STREAMS = {"PPMx": 10, "PPMx-L": 20, "MUK": 30, "CAI": 40}


def derive_seed(*path: int) -> int:
    """Deterministic child seed for a (master seed, replicate, stream) path."""
    return int(np.random.SeedSequence(tuple(int(p) for p in path)).generate_state(1)[0])


# ---------------------------------------------------------------------------
# Scenarios


@dataclass(frozen=True)
class Scenario:
    """Per-unit hypothetical incidence rates (events per person-day)."""

    scenario_id: str
    rates: tuple[float, ...]

    def __post_init__(self) -> None:
        if any(not r > 0 for r in self.rates):
            raise ValueError("scenario rates must be positive")


def scenario_from_config(config_text: str, layout: Dataset, scenario_id: str) -> Scenario:
    """Resolve a scenario file against an unblinded layout.

    Rows are matched on (study, intervention, dose); every layout unit must
    be covered exactly once and no row may go unused.
    """
    doc = json.loads(config_text)
    scale = float(doc.get("ir_scale", 1.0))
    by_key: dict[tuple[str, str, str], float] = {}
    for row in doc["rows"]:
        key = (row["study"], row["intervention"], row.get("dose", ""))
        if key in by_key:
            raise DataError(f"duplicate scenario row for {key!r}")
        try:
            by_key[key] = float(row["ir"][scenario_id]) * scale
        except KeyError:
            raise DataError(f"scenario {scenario_id!r} missing for row {key!r}") from None
    rates = []
    for u in layout.units:
        key = (u.study_id, u.intervention_label, u.dose_label)
        if key not in by_key:
            raise DataError(f"scenario does not cover layout unit {key!r}")
        rates.append(by_key.pop(key))
    if by_key:
        raise DataError(f"scenario rows without a layout unit: {sorted(by_key)}")
    return Scenario(scenario_id=scenario_id, rates=tuple(rates))


def simulate_dataset(scenario: Scenario, layout: Dataset,
                     rng: np.random.Generator) -> Dataset:
    """Draw Poisson counts for every layout unit at its scenario rate."""
    if len(scenario.rates) != layout.n_units:
        raise DataError("scenario does not match the layout's units")
    t = np.array([u.t for u in layout.units])
    y = rng.poisson(t * np.asarray(scenario.rates))
    return layout.with_counts(y)


# ---------------------------------------------------------------------------
# Method configuration


@dataclass(frozen=True)
class MethodConfig:
    """Decision and sampler settings for one method in a comparison run."""

    method: str
    delta: float
    lambda1: float | None = None
    lambda2: float | None = None
    lambda3: float | None = None
    iterations: int = 4000
    burn_in: int = 1000
    total_mass: float = 2.0
    hyper: Hyperparams = field(default_factory=Hyperparams)
    engine: str = "auto"
    covariate_subset: tuple[str, ...] | None = None
    grid_size: int = 10_000          # MUK grid resolution
    meta_iterations: int = 2000      # MUK background meta-analysis
    meta_burn_in: int = 500

    def __post_init__(self) -> None:
        if self.method not in ALL_METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.delta < 0:
            raise ValueError("delta must be nonnegative")

    def with_thresholds(self, lambda1=None, lambda2=None, lambda3=None) -> "MethodConfig":
        return replace(self, lambda1=self.lambda1 if lambda1 is None else lambda1,
                       lambda2=self.lambda2 if lambda2 is None else lambda2,
                       lambda3=self.lambda3 if lambda3 is None else lambda3)


def reduced_covariate_subset(layout: Dataset) -> tuple[str, ...]:
    """Covariate subset of the reduced-covariate sensitivity variant."""
    return tuple(n for n in layout.schema.names if n not in PPMX_L_DROPPED)


# ---------------------------------------------------------------------------
# Precomputed layout assets


@dataclass(frozen=True)
class _PpmxAssets:
    simmat_blinded: np.ndarray
    simmat_unblinded: np.ndarray
    weights_blinded: np.ndarray      # focus-by-reference rows for the blinded event
    weights_unblinded: np.ndarray    # treatment-by-other rows for the report event


class SimulationContext:
    """Layout-derived arrays shared by every replicate.

    Covariates, exposures, similarity matrices and reference weights do not
    depend on the simulated counts, so they are computed once.
    """

    def __init__(self, layout: Dataset):
        if layout.blinded:
            raise DataError("the simulation layout must be the unblinded dataset")
        self.layout = layout
        self.blinded_layout = to_blinded(layout)
        self.t_unblinded = np.array([u.t for u in layout.units])
        self.t_blinded = np.array([u.t for u in self.blinded_layout.units])

        # blinded count vector assembly: merged current unit + passthrough
        cur = set(layout.current_indices())
        self.current_arm_indices = sorted(cur)
        src = []
        for u_b in self.blinded_layout.units:
            if u_b.study_id == layout.current_study_id:
                src.append(-1)
            else:
                src.append(next(i for i, u in enumerate(layout.units)
                                if u.study_id == u_b.study_id
                                and u.cohort_label == u_b.cohort_label))
        self._blind_src = src
        self.blinded_current = [i for i, s in enumerate(src) if s == -1]
        self.blinded_reference = [i for i, s in enumerate(src) if s >= 0]

        self.treatment_indices = layout.treatment_indices()
        self.control_indices = layout.control_indices()
        self.unblinded_reference = [i for i in range(layout.n_units)
                                    if i not in set(self.treatment_indices)]

        # blinded monitoring model inputs
        nu = self.blinded_layout.nu
        placebo_mass = sum(m for c, m in nu.components if isinstance(c, Placebo))
        if not 0.0 < placebo_mass < 1.0:
            raise DataError("blinding mixture must put mass on both control and treatment")
        self.exposure_ratio = (1.0 - placebo_mass) / placebo_mass
        self.historical_control_indices = [
            i for i in layout.historical_indices()
            if isinstance(layout.units[i].intervention, Placebo)
        ]
        merged = self.blinded_current[0]
        self.blinded_total_exposure = float(self.t_blinded[merged])

        self._assets: dict[tuple[str, ...] | None, _PpmxAssets] = {}

    def blind_counts(self, y_unblinded: np.ndarray) -> np.ndarray:
        out = np.empty(len(self._blind_src), dtype=float)
        merged_total = float(y_unblinded[self.current_arm_indices].sum())
        for i, s in enumerate(self._blind_src):
            out[i] = merged_total if s == -1 else y_unblinded[s]
        return out

    def ppmx_assets(self, subset: tuple[str, ...] | None) -> _PpmxAssets:
        if subset not in self._assets:
            params = SimilarityParams(self.layout.schema, subset=subset)
            sim_b = similarity_matrix(self.blinded_layout, params)
            sim_u = similarity_matrix(self.layout, params)
            w_b = decision.reference_weights(sim_b, self.blinded_current,
                                             self.blinded_reference)
            w_u = decision.reference_weights(sim_u, self.treatment_indices,
                                             self.unblinded_reference)
            self._assets[subset] = _PpmxAssets(sim_b, sim_u, w_b, w_u)
        return self._assets[subset]

    def warm_up(self, configs: Sequence[MethodConfig]) -> None:
        for cfg in configs:
            if cfg.method in PPMX_METHODS:
                self.ppmx_assets(cfg.covariate_subset)


# ---------------------------------------------------------------------------
# Replicates


@dataclass(frozen=True)
class ReplicateOutcome:
    """Per-replicate decision results for one method."""

    pi1: float | None = None
    pi2: float | None = None
    pi3: float | None = None
    e1: bool | None = None
    e2: bool | None = None
    e3: bool | None = None
    composite: bool | None = None


def _ppmx_replicate(ctx: SimulationContext, cfg: MethodConfig, y23: np.ndarray,
                    master_seed: int, rep: int, stage2: bool) -> ReplicateOutcome:
    assets = ctx.ppmx_assets(cfg.covariate_subset)
    base = _METHOD_STREAMS[cfg.method]
    y21 = ctx.blind_counts(y23)
    mcmc = McmcConfig(iterations=cfg.iterations, burn_in=cfg.burn_in,
                      seed=derive_seed(master_seed, rep, base))
    draws = run_chain_arrays(y21, ctx.t_blinded, assets.simmat_blinded,
                             cfg.total_mass, cfg.hyper, mcmc, engine=cfg.engine)
    pi1 = decision.event_probability(
        draws.theta, ctx.blinded_current, cfg.delta,
        reference=ctx.blinded_reference, weights=assets.weights_blinded)
    e1 = None if cfg.lambda1 is None else pi1 > cfg.lambda1

    pi2 = pi3 = None
    e2 = e3 = composite = None
    if stage2 and e1 is not None:
        composite = False
        if e1:
            mcmc2 = McmcConfig(iterations=cfg.iterations, burn_in=cfg.burn_in,
                               seed=derive_seed(master_seed, rep, base + 1))
            draws2 = run_chain_arrays(y23, ctx.t_unblinded, assets.simmat_unblinded,
                                      cfg.total_mass, cfg.hyper, mcmc2, engine=cfg.engine)
            pi2 = decision.event_probability(
                draws2.theta, ctx.treatment_indices, cfg.delta,
                reference=ctx.unblinded_reference, weights=assets.weights_unblinded)
            pi3 = decision.event_probability(
                draws2.theta, ctx.treatment_indices, cfg.delta,
                control=ctx.control_indices)
            e2 = None if cfg.lambda2 is None else pi2 > cfg.lambda2
            e3 = None if cfg.lambda3 is None else pi3 > cfg.lambda3
            composite = bool(e2) or bool(e3)
    return ReplicateOutcome(pi1=pi1, pi2=pi2, pi3=pi3, e1=e1, e2=e2, e3=e3,
                            composite=composite)


def _muk_replicate(ctx: SimulationContext, cfg: MethodConfig, y23: np.ndarray,
                   master_seed: int, rep: int) -> ReplicateOutcome:
    controls = [(int(y23[i]), float(ctx.t_unblinded[i]))
                for i in ctx.historical_control_indices]
    background = comparators.fit_background_meta(
        controls, iterations=cfg.meta_iterations, burn_in=cfg.meta_burn_in,
        seed=derive_seed(master_seed, rep, _METHOD_STREAMS["MUK"]))
    y_total = int(y23[ctx.current_arm_indices].sum())
    post = comparators.fit_blinded_muk(y_total, ctx.blinded_total_exposure,
                                       ctx.exposure_ratio, background,
                                       n_grid=cfg.grid_size)
    pi1 = comparators.muk_unblind_prob(post, cfg.delta)
    e1 = None if cfg.lambda1 is None else pi1 > cfg.lambda1
    return ReplicateOutcome(pi1=pi1, e1=e1)


def _cai_replicate(ctx: SimulationContext, cfg: MethodConfig, y23: np.ndarray,
                   master_seed: int, rep: int) -> ReplicateOutcome:
    sim_ds = ctx.layout.with_counts(y23.astype(int))
    studies = comparators.two_arm_view(sim_ds)
    draws = comparators.fit_cai(
        studies, iterations=cfg.iterations, burn_in=cfg.burn_in,
        seed=derive_seed(master_seed, rep, _METHOD_STREAMS["CAI"]))
    pi2, pi3 = comparators.cai_event_probs(draws, cfg.delta)
    e2 = None if cfg.lambda2 is None else pi2 > cfg.lambda2
    e3 = None if cfg.lambda3 is None else pi3 > cfg.lambda3
    composite = None
    if e2 is not None or e3 is not None:
        composite = bool(e2) or bool(e3)
    return ReplicateOutcome(pi2=pi2, pi3=pi3, e2=e2, e3=e3, composite=composite)


def _run_one_replicate(rep: int, *, ctx: SimulationContext, scenario: Scenario,
                       configs: Sequence[MethodConfig], master_seed: int,
                       stage2: bool) -> dict[str, ReplicateOutcome]:
    rng = np.random.default_rng(derive_seed(master_seed, rep, _STREAM_DATA))
    y23 = rng.poisson(ctx.t_unblinded * np.asarray(scenario.rates)).astype(float)
    out: dict[str, ReplicateOutcome] = {}
    for cfg in configs:
        if cfg.method in PPMX_METHODS:
            out[cfg.method] = _ppmx_replicate(ctx, cfg, y23, master_seed, rep, stage2)
        elif cfg.method == "MUK":
            out[cfg.method] = _muk_replicate(ctx, cfg, y23, master_seed, rep)
        elif cfg.method == "CAI":
            out[cfg.method] = _cai_replicate(ctx, cfg, y23, master_seed, rep)
    return out


def run_replicates(layout: Dataset, scenario: Scenario,
                   configs: Sequence[MethodConfig], n_reps: int, seed: int,
                   *, workers: int = 1, stage2: bool = True,
                   ctx: SimulationContext | None = None,
                   ) -> list[dict[str, ReplicateOutcome]]:
    """Evaluate every method on ``n_reps`` independently simulated datasets."""
    if n_reps < 1:
        raise ValueError("need at least one replicate")
    names = [c.method for c in configs]
    if len(set(names)) != len(names):
        raise ValueError("duplicate method configs")
    ctx = ctx or SimulationContext(layout)
    ctx.warm_up(configs)
    task = partial(_run_one_replicate, ctx=ctx, scenario=scenario,
                   configs=tuple(configs), master_seed=seed, stage2=stage2)
    if workers <= 1:
        return [task(rep) for rep in range(n_reps)]
    with Pool(processes=workers) as pool:
        return pool.map(task, range(n_reps))


# ---------------------------------------------------------------------------
# Tallies


@dataclass(frozen=True)
class MethodOC:
    """Tallies for one method over a replicate run."""

    method: str
    n_reps: int
    e1_count: int | None
    composite_count: int | None
    delta: float
    lambda1: float | None
    lambda2: float | None
    lambda3: float | None

    @property
    def e1_frequency(self) -> float | None:
        return None if self.e1_count is None else self.e1_count / self.n_reps

    @property
    def composite_frequency(self) -> float | None:
        return None if self.composite_count is None else self.composite_count / self.n_reps

    def to_dict(self) -> dict:
        return {
            "method": self.method, "n_reps": self.n_reps,
            "e1_count": self.e1_count, "e1_frequency": self.e1_frequency,
            "composite_count": self.composite_count,
            "composite_frequency": self.composite_frequency,
            "delta": self.delta, "lambda1": self.lambda1,
            "lambda2": self.lambda2, "lambda3": self.lambda3,
        }


@dataclass(frozen=True)
class OCResult:
    """Operating characteristics of every method under one scenario."""

    scenario_id: str
    n_reps: int
    seed: int
    methods: Mapping[str, MethodOC]

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario_id, "n_reps": self.n_reps, "seed": self.seed,
            "methods": {name: m.to_dict() for name, m in sorted(self.methods.items())},
        }


def run_operating_characteristics(layout: Dataset, scenario: Scenario,
                                  configs: Sequence[MethodConfig], n_reps: int,
                                  seed: int, *, workers: int = 1,
                                  ctx: SimulationContext | None = None) -> OCResult:
    """Tally the unblinding and unblind-and-report events over replicates.

    For threshold-gated methods the composite counts replicates where the
    unblinding event fired and at least one reporting event fired; for the
    relative-risk meta-analysis (which has no blinded stage) it counts
    reporting events directly.
    """
    outcomes = run_replicates(layout, scenario, configs, n_reps, seed,
                              workers=workers, stage2=True, ctx=ctx)
    methods: dict[str, MethodOC] = {}
    for cfg in configs:
        rows = [o[cfg.method] for o in outcomes]
        e1: int | None
        comp: int | None
        if cfg.method in PPMX_METHODS:
            e1 = sum(1 for r in rows if r.e1)
            comp = sum(1 for r in rows if r.e1 and r.composite)
        elif cfg.method == "MUK":
            e1 = sum(1 for r in rows if r.e1)
            comp = None
        else:   # CAI
            e1 = None
            comp = sum(1 for r in rows if r.composite)
        methods[cfg.method] = MethodOC(
            method=cfg.method, n_reps=n_reps, e1_count=e1, composite_count=comp,
            delta=cfg.delta, lambda1=cfg.lambda1, lambda2=cfg.lambda2,
            lambda3=cfg.lambda3)
    return OCResult(scenario_id=scenario.scenario_id, n_reps=n_reps, seed=seed,
                    methods=methods)


# ---------------------------------------------------------------------------
# Threshold calibration


@dataclass(frozen=True)
class CalibrationResult:
    """A calibrated threshold plus the statistics it was computed from."""

    which: str                    # "lambda1" or "lambda23"
    threshold: float
    target: float
    n_reps: int
    degenerate: bool
    shortfall: bool               # too few eligible replicates to reach the target
    statistics: tuple[float, ...]

    def to_dict(self) -> dict:
        return {"which": self.which, "threshold": self.threshold,
                "target": self.target, "n_reps": self.n_reps,
                "degenerate": self.degenerate, "shortfall": self.shortfall}


def threshold_from_statistics(values: Sequence[float], target: float,
                              which: str = "lambda1") -> CalibrationResult:
    """Empirical (1 - target) order statistic so exceedance stays at the target.

    With n sorted values, the threshold is the ceil((1 - target) n)-th
    ascending order statistic, so at most ``target * n`` values exceed it
    strictly. ``-inf`` entries mark replicates that can never trigger; when
    they swallow the quantile the threshold collapses and ``shortfall`` is
    flagged.
    """
    values = list(values)
    n = len(values)
    if n == 0:
        raise ValueError("no calibration statistics")
    if not 0.0 < target <= 1.0:
        raise ValueError("target must lie in (0, 1]")
    finite = [v for v in values if v != -math.inf]
    ordered = sorted(values)
    degenerate = len(set(values)) == 1
    if target == 1.0:
        thr = min(finite) - 1e-12 if finite else 0.0
        return CalibrationResult(which, thr, target, n, degenerate,
                                 shortfall=not finite, statistics=tuple(values))
    k = math.ceil((1.0 - target) * n)
    thr = ordered[k - 1]
    shortfall = thr == -math.inf
    if shortfall:
        thr = (min(finite) - 1e-12) if finite else 0.0
    return CalibrationResult(which, float(thr), target, n, degenerate,
                             shortfall=shortfall, statistics=tuple(values))


def calibrate_thresholds(layout: Dataset, scenario: Scenario,
                         configs: Sequence[MethodConfig], target: float,
                         which: str, n_reps: int, seed: int, *,
                         workers: int = 1,
                         ctx: SimulationContext | None = None,
                         ) -> dict[str, CalibrationResult]:
    """Calibrate per-method thresholds on a calibration scenario.

    ``which="lambda1"`` calibrates the unblinding threshold from the
    per-replicate unblinding probabilities (no second stage is run).
    ``which="lambda23"`` calibrates one common reporting threshold from the
    larger of the two reporting probabilities; threshold-gated methods
    contribute ``-inf`` for replicates that did not unblind (their
    ``lambda1`` must already be set), so the target rate applies to the
    combined unblind-and-report event.
    """
    if which not in ("lambda1", "lambda23"):
        raise ValueError("which must be 'lambda1' or 'lambda23'")
    if target * n_reps < 5:
        raise ValueError("target times replicate count should be at least 5")
    stage2 = which == "lambda23"
    if which == "lambda1" and any(c.method == "CAI" for c in configs):
        raise ValueError("the relative-risk meta-analysis has no unblinding stage")
    if stage2:
        for c in configs:
            if c.method in PPMX_METHODS and c.lambda1 is None:
                raise ValueError(f"{c.method}: lambda23 calibration needs lambda1")
    outcomes = run_replicates(layout, scenario, configs, n_reps, seed,
                              workers=workers, stage2=stage2, ctx=ctx)
    results: dict[str, CalibrationResult] = {}
    for cfg in configs:
        rows = [o[cfg.method] for o in outcomes]
        if which == "lambda1":
            stats = [r.pi1 for r in rows]
        else:
            stats = []
            for r in rows:
                if cfg.method == "CAI":
                    stats.append(max(r.pi2, r.pi3))
                elif r.e1:
                    stats.append(max(r.pi2, r.pi3))
                else:
                    stats.append(-math.inf)
        results[cfg.method] = threshold_from_statistics(stats, target, which)
    return results
