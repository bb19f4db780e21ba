from dataclasses import dataclass, field

import numpy as np

from utils.errors import ShapeError


def gamma_count_update(count, r, gamma):
    count = np.asarray(count, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)

    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f'gamma must lie in [0, 1], got {gamma}')

    if (count < 0).any():
        raise ValueError('Discounted counts cannot be negative')

    return gamma * count + r


def top_c(count, C, incumbent=()):
    """Ids of the C largest counts. Equal counts keep current residents first,
    then the lower expert index."""
    count = np.asarray(count, dtype=np.float64)
    E = count.shape[0]
    challenger = np.ones(E, dtype=np.int8)
    challenger[list(incumbent)] = 0

    # lexsort: last key is primary
    order = np.lexsort((np.arange(E), challenger, -count))
    return frozenset(order[:C].tolist())


def initial_counts(E, C, init=None):
    """Discounted counts at t=1: uniform mass C/E, or the indicator of a prefetch set."""
    if C < 1 or C > E:
        raise ShapeError(f'Cache capacity must satisfy 1 <= C <= E, got C={C}, E={E}')

    if init is None or (isinstance(init, str) and init == 'uniform'):
        return np.full(E, C / E)

    ids = sorted(set(int(i) for i in init))
    if len(ids) != C or ids[0] < 0 or ids[-1] >= E:
        raise ShapeError(f'Prefetch set {ids} must hold exactly C={C} distinct ids below E={E}')

    count = np.zeros(E)
    count[ids] = 1.0
    return count


@dataclass
class HardCacheState:
    count: np.ndarray
    resident: frozenset
    gamma: float
    C: int

    @classmethod
    def create(cls, E, C, gamma, init=None):
        count = initial_counts(E, C, init)
        return cls(count=count, resident=top_c(count, C), gamma=gamma, C=C)


def hard_cache_step(state: HardCacheState, r):
    r = np.asarray(r, dtype=np.float64)
    requested = np.flatnonzero(r)
    misses = int(sum(1 for i in requested if i not in state.resident))

    count = gamma_count_update(state.count, r, state.gamma)
    resident = top_c(count, state.C, incumbent=state.resident)

    return misses, HardCacheState(count=count, resident=resident, gamma=state.gamma, C=state.C)


@dataclass
class MissReport:
    misses: np.ndarray
    evictions: np.ndarray = None
    requests: np.ndarray = None
    per_token: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.misses = np.asarray(self.misses, dtype=np.int64)
        L = self.misses.shape[0]
        self.evictions = np.zeros(L, dtype=np.int64) if self.evictions is None else np.asarray(self.evictions, dtype=np.int64)
        self.requests = np.zeros(L, dtype=np.int64) if self.requests is None else np.asarray(self.requests, dtype=np.int64)

    @property
    def L(self):
        return self.misses.shape[0]

    @property
    def n_miss(self):
        return int(self.misses.sum())

    @property
    def transfers_per_layer(self):
        return self.n_miss / self.L if self.L else 0.0

    @property
    def hit_rate(self):
        total = int(self.requests.sum())
        return 1.0 - self.n_miss / total if total else 1.0


    def __add__(self, other):
        return MissReport(
            misses=self.misses + other.misses,
            evictions=self.evictions + other.evictions,
            requests=self.requests + other.requests
        )


    def to_dict(self):
        return {
            'misses_per_layer': self.misses.tolist(),
            'evictions_per_layer': self.evictions.tolist(),
            'requests_per_layer': self.requests.tolist(),
            'n_miss': self.n_miss,
            'transfers_per_layer': self.transfers_per_layer,
            'hit_rate': self.hit_rate,
        }
