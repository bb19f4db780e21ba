import logging
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from cache.counts import HardCacheState, MissReport, hard_cache_step, initial_counts, top_c
from utils.errors import PolicyError, ShapeError

logger = logging.getLogger('locality.cache')

POLICY_NAMES = ('lru', 'lfu', 'gamma')


@dataclass(frozen=True)
class PolicySpec:
    name: str
    gamma: float = 1.0

    def __post_init__(self):
        if self.name not in POLICY_NAMES:
            raise PolicyError(f'Unknown eviction policy {self.name!r}, expected one of {POLICY_NAMES}')

        if self.name == 'gamma' and not 0.0 <= self.gamma <= 1.0:
            raise PolicyError(f'gamma-cache decay must lie in [0, 1], got {self.gamma}')

    @classmethod
    def parse(cls, text):
        """'lru', 'lfu' or 'gamma:<decay>'."""
        if isinstance(text, PolicySpec):
            return text

        name, _, value = str(text).lower().partition(':')
        if name == 'gamma':
            return cls(name='gamma', gamma=float(value) if value else 0.9)

        return cls(name=name)

    @property
    def label(self):
        return f'gamma:{self.gamma:g}' if self.name == 'gamma' else self.name


class EvictionPolicy:
    """One layer's expert cache. step() consumes a binary request vector with any
    number of ones and returns (misses, evictions)."""

    def __init__(self, E, C, init=None):
        if C < 1 or C > E:
            raise ShapeError(f'Cache capacity must satisfy 1 <= C <= E, got C={C}, E={E}')

        self.E = E
        self.C = C


    @property
    def resident(self) -> frozenset:
        raise NotImplementedError


    def admit(self, requested):
        raise NotImplementedError


    def step(self, r):
        requested = np.flatnonzero(np.asarray(r))
        before = self.resident
        misses = sum(1 for i in requested if i not in before)
        self.admit(requested)
        evictions = len(before - self.resident)
        return misses, evictions


class GammaCache(EvictionPolicy):
    def __init__(self, E, C, gamma, init=None):
        super().__init__(E, C, init)
        self.state = HardCacheState.create(E=E, C=C, gamma=gamma, init=init)

    @property
    def resident(self):
        return self.state.resident


    def admit(self, requested):
        r = np.zeros(self.E)
        r[requested] = 1.0
        _, self.state = hard_cache_step(self.state, r)


class LFUCache(EvictionPolicy):
    """Keeps the C experts with the largest cumulative request count."""

    def __init__(self, E, C, init=None):
        super().__init__(E, C, init)
        self.freq = initial_counts(E, C, init)
        self._resident = top_c(self.freq, C)

    @property
    def resident(self):
        return self._resident


    def admit(self, requested):
        self.freq[requested] += 1.0
        self._resident = top_c(self.freq, self.C, incumbent=self._resident)


class LRUCache(EvictionPolicy):
    """Recency list, least recent first. Experts requested in the same step are
    ordered so the lower index counts as more recent."""

    def __init__(self, E, C, init=None):
        super().__init__(E, C, init)
        counts = initial_counts(E, C, init)
        seed = np.flatnonzero(counts == counts.max())[:C]
        self.order = OrderedDict((int(i), None) for i in sorted(seed.tolist(), reverse=True))

    @property
    def resident(self):
        return frozenset(self.order)


    def admit(self, requested):
        for i in sorted(requested.tolist(), reverse=True):
            self.order[i] = None
            self.order.move_to_end(i)

        while len(self.order) > self.C:
            self.order.popitem(last=False)


def make_policy(spec, E, C, init=None) -> EvictionPolicy:
    spec = PolicySpec.parse(spec)

    if spec.name == 'lru':
        return LRUCache(E=E, C=C, init=init)
    elif spec.name == 'lfu':
        return LFUCache(E=E, C=C, init=init)

    return GammaCache(E=E, C=C, gamma=spec.gamma, init=init)


def layer_inits(init, L):
    """Normalizes a cache init into one entry per layer: None (uniform) or a set of ids."""
    if init is None or (isinstance(init, str) and init == 'uniform'):
        return [None] * L

    sets = getattr(init, 'sets', init)
    if len(sets) != L:
        raise ShapeError(f'Prefetch plan covers {len(sets)} layers, trace has {L}')

    return list(sets)


def run_eviction_policy(trace, policy, C, init=None) -> MissReport:
    inits = layer_inits(init, trace.L)
    misses = np.zeros(trace.L, dtype=np.int64)
    evictions = np.zeros(trace.L, dtype=np.int64)
    per_token = np.zeros((trace.L, trace.T), dtype=np.int64)

    for l in range(trace.L):
        cache = make_policy(policy, E=trace.E, C=C, init=inits[l])

        for t in range(trace.T):
            m, ev = cache.step(trace.requests[l, t])
            per_token[l, t] = m
            evictions[l] += ev

        misses[l] = per_token[l].sum()

    return MissReport(
        misses=misses,
        evictions=evictions,
        requests=trace.requests.sum(axis=(1, 2)),
        per_token=per_token
    )


def hard_miss_count(trace, gamma, C, init=None) -> MissReport:
    return run_eviction_policy(trace, PolicySpec(name='gamma', gamma=gamma), C, init)
