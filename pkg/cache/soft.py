from dataclasses import dataclass, replace

import torch

from moe.layers import DTYPE, as_tensor
from utils.errors import ShapeError

SOFT_INITS = ('uniform', 'fill')

# stop-gradient horizon for the cache recursion
DEFAULT_BPTT_WINDOW = 64


@dataclass
class SoftCacheState:
    """Recency-weighted soft cache c (..., E) with scalar normalizer Gamma.

    Gamma, the fill flag and the raw mass do not depend on which experts were
    requested (every step adds mass K), so they stay plain floats shared by all
    rows of c.
    """
    c: torch.Tensor
    Gamma: float
    gamma: float
    C: int
    K: float
    mode: str = 'uniform_init'
    filled: bool = True
    mass: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f'gamma must lie in [0, 1], got {self.gamma}')

        if self.C < 1:
            raise ShapeError(f'Soft cache capacity must be >= 1, got {self.C}')


def init_soft_state(E, C, K, gamma, init='uniform', batch_shape=()) -> SoftCacheState:
    """init: 'uniform' (mass C spread evenly), 'fill' (empty cache with a fill
    phase), or an (..., E) tensor / array with rows of L1 norm C (prefetch)."""
    if C > E:
        raise ShapeError(f'Soft cache capacity C={C} exceeds E={E}')

    if isinstance(init, str):
        if init not in SOFT_INITS:
            raise ShapeError(f'Unknown soft cache init {init!r}, expected one of {SOFT_INITS} or a vector')

        if init == 'fill':
            c = torch.zeros(*batch_shape, E, dtype=DTYPE)
            return SoftCacheState(c=c, Gamma=1.0, gamma=gamma, C=C, K=K, mode='fill_phase', filled=False, mass=0.0)

        c = torch.full((*batch_shape, E), C / E, dtype=DTYPE)
    else:
        c = as_tensor(init).expand(*batch_shape, E).clone()

    return SoftCacheState(c=c, Gamma=1.0, gamma=gamma, C=C, K=K, mode='uniform_init', filled=True, mass=float(C))


def soft_cache_update(state: SoftCacheState, r) -> SoftCacheState:
    if state.Gamma <= 0:
        raise ValueError(f'Soft cache normalizer must be positive, got {state.Gamma}')

    r = as_tensor(r)
    gamma, C, K = state.gamma, state.C, state.K

    if not state.filled:
        raw = gamma * state.c + r
        mass = gamma * state.mass + K

        if mass < C:
            return replace(state, c=raw, mass=mass)

        # first step at or past capacity: rescale onto the L1 = C simplex
        Gamma = mass / C
        return replace(state, c=raw / Gamma, Gamma=Gamma, filled=True, mass=float(C))

    Gamma = gamma * state.Gamma + K / C
    c = (gamma * state.Gamma * state.c + r) / Gamma
    return replace(state, c=c, Gamma=Gamma)


def soft_cache_losses(requests, gamma, C, init='uniform', K=None, bptt_window=DEFAULT_BPTT_WINDOW):
    """Per-(..., t) miss proxies <r_t, 1 - c_t> for requests shaped (..., T, E).

    requests may be binary or a differentiable surrogate; K defaults to the
    L1 norm of the first request row. With a bptt_window W, c_t only passes
    gradient back to the W most recent requests.
    """
    requests = as_tensor(requests)
    *lead, T, E = requests.shape

    if K is None:
        K = float(requests[..., 0, :].sum(-1).reshape(-1)[0]) if T else 0.0

    state = init_soft_state(E=E, C=C, K=K, gamma=gamma, init=init, batch_shape=tuple(lead))
    proxies, recent = [], []

    for t in range(T):
        r_t = requests[..., t, :]
        c = state.c

        if bptt_window and recent:
            # Gamma_t * c_t is a decayed sum of past requests; only its last W terms carry gradient
            window = torch.stack(recent[::-1], dim=0)
            decay = gamma ** torch.arange(len(recent), dtype=DTYPE)
            attached = torch.tensordot(decay, window, dims=1)
            c = c + (attached - attached.detach()) / state.Gamma

        proxies.append((r_t * (1.0 - c)).sum(-1))

        if bptt_window:
            state = soft_cache_update(state, r_t.detach())
            recent = (recent + [r_t])[-bptt_window:]
        else:
            state = soft_cache_update(state, r_t)

    if not proxies:
        return torch.zeros(*lead, 0, dtype=DTYPE)

    return torch.stack(proxies, dim=-1)


def soft_cache_loss(trace, gamma, C, init='uniform', K=None, bptt_window=DEFAULT_BPTT_WINDOW):
    """Mean cache-miss proxy over layers and tokens (and any leading batch axes).

    Accepts a RoutingTrace (uses its binary requests) or a request tensor.
    """
    requests = trace.requests if hasattr(trace, 'requests') and not isinstance(trace, torch.Tensor) else trace
    return soft_cache_losses(requests, gamma, C, init=init, K=K, bptt_window=bptt_window).mean()


def soft_cache_states(requests, gamma, C, init='uniform', K=None):
    """Every cache state c_1..c_T for a (T, E) request stream, plus the normalizers."""
    requests = as_tensor(requests)
    T, E = requests.shape

    if K is None:
        K = float(requests[0].sum()) if T else 0.0

    state = init_soft_state(E=E, C=C, K=K, gamma=gamma, init=init)
    states, normalizers = [], []

    for t in range(T):
        states.append(state.c)
        normalizers.append(state.Gamma)
        state = soft_cache_update(state, requests[t])

    return torch.stack(states) if states else torch.zeros(0, E, dtype=DTYPE), normalizers
