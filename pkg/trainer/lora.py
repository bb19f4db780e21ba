import math

import torch
import torch.nn as nn

from moe.layers import DTYPE
from utils.errors import ConfigError, ShapeError

LORA_TARGETS = ('W_u', 'W_d')


class LoRAAdapter(nn.Module):
    """Low-rank update scale * B @ A for an (out_dim x in_dim) weight. B starts at zero."""

    def __init__(self, out_dim, in_dim, rank, alpha=None, generator=None):
        super().__init__()
        self.rank = rank
        self.scale = (alpha if alpha is not None else rank) / rank
        self.A = nn.Parameter(torch.randn(rank, in_dim, generator=generator, dtype=DTYPE) / math.sqrt(in_dim))
        self.B = nn.Parameter(torch.zeros(out_dim, rank, dtype=DTYPE))


    def delta(self):
        return self.scale * (self.B @ self.A)


def apply_lora(expert, adapters):
    """Effective weights W + delta for every adapted projection; base weights are not touched."""
    effective = {}

    for name, adapter in adapters.items():
        base = getattr(expert, name)
        delta = adapter.delta()

        if delta.shape != base.shape:
            raise ShapeError(f'LoRA delta {tuple(delta.shape)} does not match {name} {tuple(base.shape)}')

        effective[name] = base + delta

    return effective


def attach_lora(model, rank, alpha=None, generator=None):
    d, d_ff = model.config.d, model.config.d_ff

    if rank < 1 or rank > min(d, d_ff):
        raise ConfigError(f'LoRA rank must lie in [1, {min(d, d_ff)}], got {rank}')

    for layer in model.layers:
        for expert in layer.experts:
            expert.adapters['W_u'] = LoRAAdapter(out_dim=d_ff, in_dim=d, rank=rank, alpha=alpha, generator=generator)
            expert.adapters['W_d'] = LoRAAdapter(out_dim=d, in_dim=d_ff, rank=rank, alpha=alpha, generator=generator)

    return model
