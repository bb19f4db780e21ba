import time
from dataclasses import dataclass, asdict

import torch

from utils.errors import ConfigError

# Host-to-device copy of one expert over PCIe takes roughly 5-6 ms
TRANSFER_SECONDS = 5.5e-3
PREFETCH_SECONDS = 0.05
COMPUTE_SECONDS = 0.02


@dataclass(frozen=True)
class LatencyModel:
    t_compute_per_token: float = COMPUTE_SECONDS
    t_transfer_per_expert: float = TRANSFER_SECONDS
    t_prefetch: float = PREFETCH_SECONDS

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ConfigError(f'latency.{name} must be >= 0, got {value}')


    @classmethod
    def calibrated(cls, model, n_tokens=64, **overrides):
        """Times single-token forwards of the toy model for the compute term."""
        with torch.no_grad():
            start = time.perf_counter()
            for i in range(n_tokens):
                model([i % model.config.V])
            per_token = (time.perf_counter() - start) / n_tokens

        return cls(t_compute_per_token=per_token, **overrides)


    def to_dict(self):
        return asdict(self)


def latency_estimate(n_miss, tokens, lat: LatencyModel, prefetched=False):
    """tokens * t_compute + n_miss * t_transfer (+ t_prefetch when a plan was loaded)."""
    if n_miss < 0 or tokens < 0:
        raise ValueError(f'Miss and token counts must be non-negative, got {n_miss}, {tokens}')

    seconds = tokens * lat.t_compute_per_token + n_miss * lat.t_transfer_per_expert
    if prefetched:
        seconds += lat.t_prefetch

    return seconds
