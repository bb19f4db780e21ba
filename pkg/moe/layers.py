import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from utils.errors import NonFiniteError, ShapeError

DTYPE = torch.float64

_PHI = {
    'silu': F.silu,
    'relu': F.relu,
}


def as_tensor(x):
    if isinstance(x, torch.Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)

    return torch.as_tensor(x, dtype=DTYPE)


def softmax(logits):
    logits = as_tensor(logits)

    if not torch.isfinite(logits).all():
        raise NonFiniteError('router logits', logits)

    return torch.softmax(logits, dim=-1)


def top_k_select(p, K: int):
    """Binary mask of the K largest entries along the last axis, lowest index first on ties."""
    p = as_tensor(p)
    E = p.shape[-1]

    if K < 1 or K > E:
        raise ShapeError(f'Top-K needs 1 <= K <= E, got K={K} with E={E}')

    # stable sort keeps the lower index ahead of an equal value
    order = torch.argsort(-p, dim=-1, stable=True)[..., :K]
    mask = torch.zeros_like(p)
    return mask.scatter(-1, order, 1.0)


class ExpertWeights(nn.Module):
    def __init__(self, d, d_ff, phi='silu', generator=None):
        super().__init__()
        self.d = d
        self.d_ff = d_ff
        self.phi = phi
        self.W_g = nn.Parameter(torch.randn(d_ff, d, generator=generator, dtype=DTYPE) / math.sqrt(d))
        self.W_u = nn.Parameter(torch.randn(d_ff, d, generator=generator, dtype=DTYPE) / math.sqrt(d))
        self.W_d = nn.Parameter(torch.randn(d, d_ff, generator=generator, dtype=DTYPE) / math.sqrt(d_ff))
        self.adapters = nn.ModuleDict()


    def weight(self, name):
        base = getattr(self, name)

        if name in self.adapters:
            return base + self.adapters[name].delta()

        return base


def expert_forward(e: ExpertWeights, x):
    x = as_tensor(x)

    if x.shape[-1] != e.d:
        raise ShapeError(f'Expert expects inputs of size {e.d}, got {tuple(x.shape)}')

    phi = _PHI[e.phi]
    hidden = phi(x @ e.weight('W_g').T) * (x @ e.weight('W_u').T)
    return hidden @ e.weight('W_d').T


class MoELayer(nn.Module):
    def __init__(self, d, d_ff, E, phi='silu', generator=None):
        super().__init__()
        self.d = d
        self.E = E
        self.W_r = nn.Parameter(torch.randn(E, d, generator=generator, dtype=DTYPE) / math.sqrt(d))
        self.experts = nn.ModuleList([
            ExpertWeights(d=d, d_ff=d_ff, phi=phi, generator=generator) for _ in range(E)
        ])


    def forward(self, x, K, routing_mode='hard'):
        return moe_layer_forward(self, x, K, routing_mode=routing_mode)


def moe_layer_forward(layer: MoELayer, x, K: int, routing_mode='hard'):
    """Returns (y, p, r) for inputs of shape (d,) or (N, d).

    y sums the raw router probabilities of the selected experts times their
    outputs; p is not renormalized over the Top-K set.
    """
    x = as_tensor(x)

    if x.shape[-1] != layer.d:
        raise ShapeError(f'MoE layer expects inputs of size {layer.d}, got {tuple(x.shape)}')

    single = x.dim() == 1
    x2 = x.unsqueeze(0) if single else x

    p = softmax(x2 @ layer.W_r.T)
    r = top_k_select(p.detach(), K)

    if routing_mode == 'soft':
        gates = p
        active = torch.ones_like(r)
    else:
        gates = p * r
        active = r

    y = torch.zeros_like(x2)
    for i, expert in enumerate(layer.experts):
        idx = torch.nonzero(active[:, i], as_tuple=True)[0]
        if idx.numel() == 0:
            continue

        y = y.index_add(0, idx, gates[idx, i, None] * expert_forward(expert, x2[idx]))

    if single:
        return y[0], p[0], r[0]

    return y, p, r
