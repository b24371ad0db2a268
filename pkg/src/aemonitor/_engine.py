"""Compiled MCMC core.

Same sweep as the reference engine in :mod:`aemonitor.inference`, fused
into one jitted loop so that repeat-simulation studies stay cheap. Uses
numba's thread-local legacy NumPy RNG, seeded once at kernel entry, so a
(seed, config) pair fully determines the draw stream. The stream differs
from the reference engine's Generator stream; correctness of both paths
is established against the exact small-instance posterior, not against
each other draw-by-draw.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit


@njit(cache=True)
def _log_gamma_pdf(x, shape, rate):
    return (shape * math.log(rate) - math.lgamma(shape)
            + (shape - 1.0) * math.log(x) - rate * x)


@njit(cache=True)
def _run_kernel(y, t, sim, total_mass,
                a_shape, a_rate, b_shape, b_rate,
                prop_scale, m_aux,
                n_iter, burn_in, thin, seed,
                a0, b0, update_ab, prior_only):
    np.random.seed(seed)
    n = y.shape[0]
    max_k = n + 1

    labels = np.zeros(n, np.int64)
    theta = np.empty(max_k)
    within = np.zeros(max_k)
    sizes = np.zeros(max_k, np.int64)

    pooled = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            pooled += sim[i, j]
    if n == 1 or pooled > 0.0:
        k = 1
        sizes[0] = n
        within[0] = pooled
        theta[0] = (y.sum() + a0) / (t.sum() + b0)
    else:
        k = n
        for i in range(n):
            labels[i] = i
            sizes[i] = 1
            theta[i] = (y[i] + a0) / (t[i] + b0)
    a = a0
    b = b0

    n_kept = (n_iter - burn_in + thin - 1) // thin
    theta_draws = np.empty((n_kept, n))
    label_draws = np.empty((n_kept, n), np.int64)
    k_trace = np.empty(n_kept, np.int64)
    a_trace = np.empty(n_kept)
    b_trace = np.empty(n_kept)

    cross = np.zeros(max_k)
    log_w = np.empty(max_k + m_aux)
    aux = np.empty(m_aux)
    sum_y = np.zeros(max_k)
    sum_t = np.zeros(max_k)

    kept = 0
    for it in range(n_iter):
        # shape a: MH with log-normal proposal (asymmetry term log a'/a)
        if update_ab:
            a_new = a * math.exp(prop_scale * np.random.normal(0.0, 1.0))
            lr = ((a_shape - 1.0) * (math.log(a_new) - math.log(a))
                  - a_rate * (a_new - a))
            for c in range(k):
                lr += (_log_gamma_pdf(theta[c], a_new, b)
                       - _log_gamma_pdf(theta[c], a, b))
            lr += math.log(a_new) - math.log(a)
            if math.log(np.random.random()) < lr:
                a = a_new
            # rate b: conjugate Gibbs
            s_theta = 0.0
            for c in range(k):
                s_theta += theta[c]
            b = np.random.gamma(a * k + b_shape, 1.0 / (s_theta + b_rate))

        # partition sweep: auxiliary-component membership updates
        for u in range(n):
            h_old = labels[u]
            x_old = 0.0
            for v in range(n):
                if v != u and labels[v] == h_old:
                    x_old += sim[u, v]
            within[h_old] -= x_old
            sizes[h_old] -= 1
            labels[u] = -1
            was_singleton = False
            orphan_theta = 0.0
            if sizes[h_old] == 0:
                was_singleton = True
                orphan_theta = theta[h_old]
                k -= 1
                if h_old != k:
                    theta[h_old] = theta[k]
                    within[h_old] = within[k]
                    sizes[h_old] = sizes[k]
                    for v in range(n):
                        if labels[v] == k:
                            labels[v] = h_old

            for h in range(k):
                cross[h] = 0.0
            for v in range(n):
                if labels[v] >= 0:
                    cross[labels[v]] += sim[u, v]

            for h in range(k):
                nh = sizes[h]
                lw = math.log(float(nh))
                if nh == 1:
                    if cross[h] > 0.0:
                        lw += math.log(cross[h])
                    else:
                        lw = -np.inf
                else:
                    w_new = within[h] + cross[h]
                    if w_new <= 0.0:
                        lw = -np.inf
                    else:
                        pairs_old = nh * (nh - 1) / 2.0
                        pairs_new = (nh + 1) * nh / 2.0
                        g_old = within[h] / pairs_old
                        if g_old < 1e-300:
                            g_old = 1e-300
                        lw += math.log(w_new / pairs_new) - math.log(g_old)
                if lw > -np.inf and not prior_only:
                    mu = t[u] * theta[h]
                    lw += y[u] * math.log(mu) - mu - math.lgamma(y[u] + 1.0)
                log_w[h] = lw
            for i_aux in range(m_aux):
                if i_aux == 0 and was_singleton:
                    th = orphan_theta     # singleton keeps its rate as aux 1
                else:
                    th = np.random.gamma(a, 1.0 / b)
                aux[i_aux] = th
                lw = math.log(total_mass) - math.log(float(m_aux))
                if not prior_only:
                    mu = t[u] * th
                    lw += y[u] * math.log(mu) - mu - math.lgamma(y[u] + 1.0)
                log_w[k + i_aux] = lw

            mx = -np.inf
            for idx in range(k + m_aux):
                if log_w[idx] > mx:
                    mx = log_w[idx]
            total = 0.0
            for idx in range(k + m_aux):
                total += math.exp(log_w[idx] - mx)
            r = np.random.random() * total
            acc = 0.0
            choice = k + m_aux - 1
            for idx in range(k + m_aux):
                acc += math.exp(log_w[idx] - mx)
                if r <= acc:
                    choice = idx
                    break
            if choice < k:
                labels[u] = choice
                within[choice] += cross[choice]
                sizes[choice] += 1
            else:
                labels[u] = k
                theta[k] = aux[choice - k]
                within[k] = 0.0
                sizes[k] = 1
                k += 1

        # cluster rates: conjugate Gibbs
        for c in range(k):
            sum_y[c] = 0.0
            sum_t[c] = 0.0
        for v in range(n):
            sum_y[labels[v]] += y[v]
            sum_t[labels[v]] += t[v]
        for c in range(k):
            if prior_only:
                theta[c] = np.random.gamma(a, 1.0 / b)
            else:
                theta[c] = np.random.gamma(a + sum_y[c], 1.0 / (b + sum_t[c]))

        if it >= burn_in and (it - burn_in) % thin == 0:
            for v in range(n):
                theta_draws[kept, v] = theta[labels[v]]
                label_draws[kept, v] = labels[v]
            k_trace[kept] = k
            a_trace[kept] = a
            b_trace[kept] = b
            kept += 1

    return theta_draws, label_draws, k_trace, a_trace, b_trace


def run_kernel_wrapper(y, t, simmat, total_mass, hyper, mcmc, fixed_ab, prior_only):
    """Unpack config objects and dispatch to the jitted kernel."""
    if fixed_ab is not None:
        a0, b0 = float(fixed_ab[0]), float(fixed_ab[1])
        update_ab = False
    else:
        a0, b0 = 1.0, 1.0
        update_ab = True
    seed32 = int(np.random.SeedSequence(mcmc.seed).generate_state(1)[0])
    return _run_kernel(
        np.ascontiguousarray(y), np.ascontiguousarray(t),
        np.ascontiguousarray(simmat), float(total_mass),
        hyper.a_shape, hyper.a_rate, hyper.b_shape, hyper.b_rate,
        hyper.prop_scale, int(hyper.m_aux),
        int(mcmc.iterations), int(mcmc.burn_in), int(mcmc.thin), seed32,
        a0, b0, update_ab, bool(prior_only),
    )
