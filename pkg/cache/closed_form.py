"""Brute-force references for the soft cache: direct unrolling of the discounted
counts and the expected-loss closed form in terms of request inner products."""
import numpy as np

from cache.counts import initial_counts
from moe.trace import stack_traces
from utils.errors import ShapeError


def normalizer_closed_form(t, gamma, K, C):
    """Gamma at step t (1-based) for a cache started with L1 mass C."""
    return gamma ** (t - 1) + (K / C) * sum(gamma ** (t - 1 - i) for i in range(1, t))


def _initial_vector(E, C, init):
    if init is None or (isinstance(init, str) and init == 'uniform'):
        return initial_counts(E, C)

    if isinstance(init, str):
        raise ShapeError(f'Closed form needs a start cache of mass C, not {init!r}')

    c1 = np.asarray(init, dtype=np.float64)
    if abs(c1.sum() - C) > 1e-9:
        raise ShapeError(f'Start cache must have L1 norm C={C}, got {c1.sum()}')

    return c1


def unrolled_soft_cache(requests, gamma, C, init='uniform'):
    """c_t = C * count_t / ||count_t||_1 with count_t = gamma^(t-1) c_1 + sum_i gamma^(t-1-i) r_i,
    each step summed from scratch."""
    requests = np.asarray(requests, dtype=np.float64)
    T, E = requests.shape
    c1 = _initial_vector(E, C, init)
    out = np.zeros((T, E))

    for t in range(1, T + 1):
        count = gamma ** (t - 1) * c1
        for i in range(1, t):
            count = count + gamma ** (t - 1 - i) * requests[i - 1]

        out[t - 1] = C * count / count.sum()

    return out


def lcs_closed_form(traces, gamma, C, init='uniform'):
    """Mean soft cache loss over traces via K - (1/LT) sum Gamma_t^-1 (sum_i gamma^(t-1-i) phi(t,i) + gamma^(t-1) phi(t,1))."""
    requests, _ = stack_traces(list(traces))
    N, L, T, E = requests.shape
    K = requests[0, 0, 0].sum()
    c1 = _initial_vector(E, C, init)

    # phi[l, t, i] = E_x <r_t, r_i>, phi_init[l, t] = E_x <r_t, c_1>
    phi = np.einsum('nlte,nlie->lti', requests, requests) / N
    phi_init = np.einsum('nlte,e->lt', requests, c1) / N

    total = 0.0
    for t in range(1, T + 1):
        Gamma = normalizer_closed_form(t, gamma, K, C)
        kept = gamma ** (t - 1) * phi_init[:, t - 1]
        for i in range(1, t):
            kept = kept + gamma ** (t - 1 - i) * phi[:, t - 1, i - 1]

        total += kept.sum() / Gamma

    return float(K - total / (L * T))
