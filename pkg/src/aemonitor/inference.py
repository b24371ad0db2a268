"""MCMC engine for the partitioned Poisson-Gamma rate model.

Model: counts y_u ~ Poisson(t_u * theta_{c_u}) with cluster rates
theta*_k ~ Gamma(a, b), Gamma hyperpriors on a and b, and the
cohesion-times-similarity partition prior. One sweep updates, in order:
the shape a (Metropolis-Hastings with a log-normal proposal), the rate b
(Gibbs), the partition (auxiliary-component Gibbs over cluster
memberships), and the cluster rates (Gibbs).

Two interchangeable engines run the sweep: ``python`` (readable reference,
NumPy Generator streams) and ``numba`` (compiled, used by the simulation
harness). Both are deterministic given their seed; their streams differ.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data_model import Dataset
from .partition import Partition, PriorConfig, log_cohesion
from .similarity import similarity_matrix

DEFAULT_ITERATIONS = 10_000
DEFAULT_BURN_IN = 2_000


@dataclass(frozen=True)
class Hyperparams:
    """Gamma hyperpriors on (a, b), MH proposal scale, auxiliary count."""

    a_shape: float = 1.0       # prior shape of a
    a_rate: float = 1.0        # prior rate of a
    b_shape: float = 1.0       # prior shape of b
    b_rate: float = 1.0        # prior rate of b
    prop_scale: float = 0.5    # sd of the log-normal proposal for a
    m_aux: int = 3             # auxiliary components per membership update

    def __post_init__(self) -> None:
        for name in ("a_shape", "a_rate", "b_shape", "b_rate", "prop_scale"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.m_aux < 1:
            raise ValueError("m_aux must be at least 1")


@dataclass(frozen=True)
class McmcConfig:
    iterations: int = DEFAULT_ITERATIONS
    burn_in: int = DEFAULT_BURN_IN
    thin: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.iterations > self.burn_in >= 0:
            raise ValueError("need iterations > burn_in >= 0")
        if self.thin < 1:
            raise ValueError("thin must be at least 1")

    @property
    def n_kept(self) -> int:
        return (self.iterations - self.burn_in + self.thin - 1) // self.thin


@dataclass
class ChainState:
    """Mutable sampler state: cluster labels, cluster rates, hyperparameters."""

    labels: np.ndarray         # per-unit cluster index, 0-based, compact
    theta: np.ndarray          # per-cluster rate, length = number of clusters
    a: float
    b: float

    @property
    def n_clusters(self) -> int:
        return len(self.theta)

    def members(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.labels == k)


@dataclass(frozen=True)
class PosteriorDraws:
    """Retained post-burn-in draws plus run metadata."""

    theta: np.ndarray          # (n_draws, n_units) per-unit rates
    labels: np.ndarray         # (n_draws, n_units) cluster labels (not canonical)
    k_trace: np.ndarray
    a_trace: np.ndarray
    b_trace: np.ndarray
    unit_keys: tuple[str, ...]
    seed: int
    iterations: int
    burn_in: int
    thin: int
    engine: str

    @property
    def n_draws(self) -> int:
        return self.theta.shape[0]

    @property
    def n_units(self) -> int:
        return self.theta.shape[1]

    def co_clustering(self) -> np.ndarray:
        """Fraction of draws with each unit pair in the same cluster."""
        n = self.n_units
        out = np.ones((n, n))
        for i in range(n):
            for j in range(i + 1, n):
                p = float(np.mean(self.labels[:, i] == self.labels[:, j]))
                out[i, j] = p
                out[j, i] = p
        return out

    def partition_frequencies(self) -> dict[tuple[int, ...], float]:
        """Empirical distribution over canonicalized partitions."""
        counts: dict[tuple[int, ...], int] = {}
        for row in self.labels:
            key = Partition.from_labels(row).labels
            counts[key] = counts.get(key, 0) + 1
        n = self.n_draws
        return {k: v / n for k, v in counts.items()}


# ---------------------------------------------------------------------------
# Collapsed likelihood (conjugate integration over a cluster's rate)


def cluster_marginal_likelihood(y, t, a: float, b: float) -> float:
    """Log marginal likelihood of one cluster's counts with its rate integrated out.

    For counts y_u with exposures t_u, Y = sum(y), T = sum(t):
    log prod(t^y / y!) + lgamma(a + Y) - lgamma(a) + a log b - (a + Y) log(b + T).
    """
    y = np.asarray(y, dtype=float)
    t = np.asarray(t, dtype=float)
    if y.size == 0:
        raise ValueError("cluster is empty")
    total_y = float(y.sum())
    total_t = float(t.sum())
    const = float(np.sum(y * np.log(t)) - sum(math.lgamma(v + 1.0) for v in y))
    return (const + math.lgamma(a + total_y) - math.lgamma(a)
            + a * math.log(b) - (a + total_y) * math.log(b + total_t))


# ---------------------------------------------------------------------------
# Single-step updates (reference implementations)


def shape_update_log_ratio(a_new: float, a_cur: float, theta: np.ndarray,
                           b: float, hyper: Hyperparams) -> float:
    """Log MH ratio for the shape update, including proposal asymmetry.

    The log-normal proposal has density q(a'|a) with q(a|a')/q(a'|a) = a'/a,
    which contributes log(a') - log(a) on top of the posterior ratio.
    """
    def log_target(a: float) -> float:
        val = (hyper.a_shape - 1.0) * math.log(a) - hyper.a_rate * a
        for th in theta:
            val += a * math.log(b) - math.lgamma(a) + (a - 1.0) * math.log(th) - b * th
        return val

    return log_target(a_new) - log_target(a_cur) + math.log(a_new) - math.log(a_cur)


def update_shape_a(state: ChainState, hyper: Hyperparams,
                   rng: np.random.Generator) -> float:
    """One MH step on a; returns the (possibly unchanged) new value."""
    a_new = state.a * math.exp(hyper.prop_scale * rng.standard_normal())
    log_r = shape_update_log_ratio(a_new, state.a, state.theta, state.b, hyper)
    if math.log(rng.random()) < log_r:
        return a_new
    return state.a


def update_rate_b(state: ChainState, hyper: Hyperparams,
                  rng: np.random.Generator) -> float:
    """Gibbs draw of b given the cluster rates."""
    shape = state.a * state.n_clusters + hyper.b_shape
    rate = float(state.theta.sum()) + hyper.b_rate
    return float(rng.gamma(shape, 1.0 / rate))


def update_cluster_rates(state: ChainState, y: np.ndarray, t: np.ndarray,
                         rng: np.random.Generator, prior_only: bool = False) -> np.ndarray:
    """Gibbs draw of every cluster rate from its conjugate conditional."""
    k = state.n_clusters
    theta = np.empty(k)
    for c in range(k):
        if prior_only:
            theta[c] = rng.gamma(state.a, 1.0 / state.b)
        else:
            m = state.labels == c
            theta[c] = rng.gamma(state.a + float(y[m].sum()),
                                 1.0 / (state.b + float(t[m].sum())))
    return theta


def _log_poisson(y: float, mu: float) -> float:
    return y * math.log(mu) - mu - math.lgamma(y + 1.0)


def update_partition_neal8(state: ChainState, y: np.ndarray, t: np.ndarray,
                           simmat: np.ndarray, total_mass: float,
                           hyper: Hyperparams, rng: np.random.Generator,
                           prior_only: bool = False) -> ChainState:
    """One full sweep of auxiliary-component membership updates.

    For each unit in order: remove it, weight every existing cluster by
    likelihood times the cohesion-and-similarity ratio, weight each of
    ``m_aux`` fresh clusters (rate drawn from the Gamma(a, b) prior) by
    likelihood times total_mass / m_aux, then resample the membership.
    When the removed unit was a singleton, its current rate is kept as the
    first auxiliary component, as the auxiliary-variable scheme requires.
    """
    labels = state.labels.copy()
    theta = list(state.theta)
    n = len(labels)

    # within-cluster similarity sums, maintained incrementally
    within = [0.0] * len(theta)
    for c in range(len(theta)):
        mem = np.flatnonzero(labels == c)
        for ii in range(len(mem)):
            for jj in range(ii + 1, len(mem)):
                within[c] += simmat[mem[ii], mem[jj]]
    sizes = [int(np.sum(labels == c)) for c in range(len(theta))]

    for u in range(n):
        h_old = labels[u]
        x_old = float(simmat[u, labels == h_old].sum()) - simmat[u, u]
        within[h_old] -= x_old
        sizes[h_old] -= 1
        labels[u] = -1
        orphan_theta = None
        if sizes[h_old] == 0:
            orphan_theta = theta[h_old]
            last = len(theta) - 1
            if h_old != last:
                theta[h_old] = theta[last]
                within[h_old] = within[last]
                sizes[h_old] = sizes[last]
                labels[labels == last] = h_old
            theta.pop()
            within.pop()
            sizes.pop()

        k = len(theta)
        cross = [float(simmat[u, labels == h].sum()) for h in range(k)]
        log_w = []
        for h in range(k):
            nh = sizes[h]
            lw = math.log(nh)          # cohesion ratio M*nh!/(M*(nh-1)!)
            if nh == 1:
                lw += math.log(cross[h]) if cross[h] > 0.0 else -math.inf
            else:
                w_new = within[h] + cross[h]
                if w_new <= 0.0:
                    lw = -math.inf
                else:
                    pairs_old = nh * (nh - 1) / 2.0
                    pairs_new = (nh + 1) * nh / 2.0
                    g_old = max(within[h] / pairs_old, 1e-300)
                    lw += math.log(w_new / pairs_new) - math.log(g_old)
            if not prior_only and lw > -math.inf:
                lw += _log_poisson(y[u], t[u] * theta[h])
            log_w.append(lw)

        aux = [float(rng.gamma(state.a, 1.0 / state.b)) for _ in range(hyper.m_aux)]
        if orphan_theta is not None:
            aux[0] = orphan_theta
        for th in aux:
            lw = math.log(total_mass) - math.log(hyper.m_aux)
            if not prior_only:
                lw += _log_poisson(y[u], t[u] * th)
            log_w.append(lw)

        arr = np.array(log_w)
        arr -= arr.max()
        probs = np.exp(arr)
        probs /= probs.sum()
        choice = int(rng.choice(len(probs), p=probs))
        if choice < k:
            labels[u] = choice
            within[choice] += cross[choice]
            sizes[choice] += 1
        else:
            labels[u] = k
            theta.append(aux[choice - k])
            within.append(0.0)
            sizes.append(1)

    return ChainState(labels=labels, theta=np.array(theta), a=state.a, b=state.b)


# ---------------------------------------------------------------------------
# Chain driver


def _initial_state(y: np.ndarray, t: np.ndarray, simmat: np.ndarray,
                   a0: float, b0: float) -> ChainState:
    n = len(y)
    pooled = float(np.triu(simmat, 1).sum())
    if n == 1 or pooled > 0.0:
        labels = np.zeros(n, dtype=np.int64)
        theta = np.array([(float(y.sum()) + a0) / (float(t.sum()) + b0)])
    else:
        # all-zero similarity: a single cluster has zero prior mass
        labels = np.arange(n, dtype=np.int64)
        theta = (y + a0) / (t + b0)
    return ChainState(labels=labels, theta=theta, a=a0, b=b0)


def _run_python(y, t, simmat, total_mass, hyper, mcmc, fixed_ab, prior_only):
    rng = np.random.default_rng(mcmc.seed)
    a0, b0 = fixed_ab if fixed_ab is not None else (1.0, 1.0)
    state = _initial_state(y, t, simmat, a0, b0)
    update_ab = fixed_ab is None

    n_kept = mcmc.n_kept
    n = len(y)
    theta_draws = np.empty((n_kept, n))
    label_draws = np.empty((n_kept, n), dtype=np.int64)
    k_trace = np.empty(n_kept, dtype=np.int64)
    a_trace = np.empty(n_kept)
    b_trace = np.empty(n_kept)

    kept = 0
    for it in range(mcmc.iterations):
        if update_ab:
            state.a = update_shape_a(state, hyper, rng)
            state.b = update_rate_b(state, hyper, rng)
        state = update_partition_neal8(state, y, t, simmat, total_mass, hyper,
                                       rng, prior_only=prior_only)
        state.theta = update_cluster_rates(state, y, t, rng, prior_only=prior_only)
        if it >= mcmc.burn_in and (it - mcmc.burn_in) % mcmc.thin == 0:
            theta_draws[kept] = state.theta[state.labels]
            label_draws[kept] = state.labels
            k_trace[kept] = state.n_clusters
            a_trace[kept] = state.a
            b_trace[kept] = state.b
            kept += 1
    return theta_draws, label_draws, k_trace, a_trace, b_trace


def run_chain(ds: Dataset, prior: PriorConfig, hyper: Hyperparams | None = None,
              mcmc: McmcConfig | None = None, *, engine: str = "auto",
              fixed_ab: tuple[float, float] | None = None,
              prior_only: bool = False) -> PosteriorDraws:
    """Run one chain on a dataset and return the retained draws.

    ``engine`` is "python", "numba" or "auto" (numba when importable).
    ``fixed_ab`` pins the hyperparameters instead of sampling them;
    ``prior_only`` drops the count likelihood everywhere, so the chain
    targets the prior (used to verify hyperprior recovery).
    """
    hyper = hyper or Hyperparams()
    mcmc = mcmc or McmcConfig()
    y = np.array([u.y for u in ds.units], dtype=float)
    t = np.array([u.t for u in ds.units], dtype=float)
    simmat = similarity_matrix(ds, prior.params)
    return run_chain_arrays(y, t, simmat, prior.total_mass, hyper, mcmc,
                            unit_keys=tuple(u.key for u in ds.units),
                            engine=engine, fixed_ab=fixed_ab, prior_only=prior_only)


def run_chain_arrays(y, t, simmat, total_mass: float, hyper: Hyperparams,
                     mcmc: McmcConfig, *, unit_keys: tuple[str, ...] | None = None,
                     engine: str = "auto",
                     fixed_ab: tuple[float, float] | None = None,
                     prior_only: bool = False) -> PosteriorDraws:
    """Array-level entry point; see :func:`run_chain`."""
    y = np.asarray(y, dtype=float)
    t = np.asarray(t, dtype=float)
    simmat = np.asarray(simmat, dtype=float)
    if engine == "auto":
        engine = "numba" if _numba_available() else "python"
    if engine == "numba":
        from . import _engine
        out = _engine.run_kernel_wrapper(y, t, simmat, total_mass, hyper, mcmc,
                                         fixed_ab, prior_only)
    elif engine == "python":
        out = _run_python(y, t, simmat, total_mass, hyper, mcmc, fixed_ab, prior_only)
    else:
        raise ValueError(f"unknown engine {engine!r}")
    theta_draws, label_draws, k_trace, a_trace, b_trace = out
    return PosteriorDraws(
        theta=theta_draws, labels=label_draws, k_trace=k_trace,
        a_trace=a_trace, b_trace=b_trace,
        unit_keys=unit_keys or tuple(str(i) for i in range(len(y))),
        seed=mcmc.seed, iterations=mcmc.iterations, burn_in=mcmc.burn_in,
        thin=mcmc.thin, engine=engine,
    )


def _numba_available() -> bool:
    try:
        import numba  # noqa: F401
    except ImportError:
        return False
    return True


# ---------------------------------------------------------------------------
# Summaries


def posterior_summaries(draws: PosteriorDraws, min_draws: int = 100) -> dict:
    """Per-unit means and 95% equal-tail intervals, plus clustering summaries."""
    if draws.n_draws < min_draws:
        raise ValueError(f"need at least {min_draws} retained draws, have {draws.n_draws}")
    lo, hi = np.quantile(draws.theta, [0.025, 0.975], axis=0)
    means = draws.theta.mean(axis=0)
    k_vals, k_counts = np.unique(draws.k_trace, return_counts=True)
    return {
        "units": [
            {"key": key, "mean": float(means[i]),
             "lower95": float(lo[i]), "upper95": float(hi[i])}
            for i, key in enumerate(draws.unit_keys)
        ],
        "k_histogram": {int(k): float(c / draws.n_draws)
                        for k, c in zip(k_vals, k_counts)},
        "a": {"mean": float(draws.a_trace.mean()), "sd": float(draws.a_trace.std())},
        "b": {"mean": float(draws.b_trace.mean()), "sd": float(draws.b_trace.std())},
        "co_clustering": draws.co_clustering().tolist(),
        "n_draws": draws.n_draws,
    }
