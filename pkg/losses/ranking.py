import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from moe.layers import as_tensor
from moe.trace import RoutingTrace
from utils.errors import ShapeError


@dataclass
class PairedTrace:
    """Frozen base router probabilities next to the fine-tuned ones for the same inputs."""
    base: RoutingTrace
    tuned: RoutingTrace

    def __post_init__(self):
        if self.base.shape != self.tuned.shape:
            raise ShapeError(f'Paired traces differ in shape: {self.base.shape} vs {self.tuned.shape}')


def rank_mistakes(p_b, p_f, rho):
    """Hinge penalty over base-ordered pairs: sum_{p_b,i > p_b,j} [rho - (p_f,i - p_f,j)]_+.

    Works on (..., E) tensors and is differentiable in p_f. Ties in p_b add no pair.
    """
    p_b = as_tensor(p_b)
    p_f = as_tensor(p_f)

    if p_b.shape != p_f.shape:
        raise ShapeError(f'Router distributions differ in shape: {tuple(p_b.shape)} vs {tuple(p_f.shape)}')

    ordered = (p_b.unsqueeze(-1) - p_b.unsqueeze(-2)) > 0
    gap = p_f.unsqueeze(-1) - p_f.unsqueeze(-2)
    return (ordered * F.relu(rho - gap)).sum(dim=(-1, -2))


def rank_matching_loss(paired, rho):
    paired = list(paired)
    if not paired:
        raise ShapeError('rank_matching_loss needs at least one paired trace')

    total, positions = 0.0, 0
    for pair in paired:
        m = rank_mistakes(pair.base.probs, pair.tuned.probs, rho)
        total += float(m.sum())
        positions += m.numel()

    return total / positions


def inversion_count(p, q, strict=True):
    """#{(i, j): p_i > p_j and q_i < q_j}, brute force over all pairs.

    With strict=True, tied entries in either vector are an error; otherwise tied
    pairs count as neither concordant nor discordant.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)

    if p.shape != q.shape or p.ndim != 1:
        raise ShapeError(f'inversion_count needs two vectors of equal length, got {p.shape} and {q.shape}')

    if strict and (len(np.unique(p)) != len(p) or len(np.unique(q)) != len(q)):
        raise ShapeError('inversion_count requires pairwise distinct entries')

    E = len(p)
    inversions = 0
    for i in range(E):
        for j in range(E):
            if p[i] > p[j] and q[i] < q[j]:
                inversions += 1

    return inversions


def kendall_tau(p, q, strict=True):
    E = len(p)
    pairs = math.comb(E, 2)
    if pairs == 0:
        raise ShapeError('Kendall tau needs at least two entries')

    return 1.0 - 2.0 * inversion_count(p, q, strict=strict) / pairs


def mean_kendall_tau(paired):
    """Diagnostic: average tau between base and tuned routers over every (layer, token)."""
    taus = []
    for pair in paired:
        E = pair.base.E
        p = pair.base.probs.reshape(-1, E)
        q = pair.tuned.probs.reshape(-1, E)
        # same pair counting as inversion_count with ties ignored
        inversions = ((p[:, :, None] > p[:, None, :]) & (q[:, :, None] < q[:, None, :])).sum(axis=(1, 2))
        taus.append(1.0 - 2.0 * inversions / math.comb(E, 2))

    return float(np.concatenate(taus).mean()) if taus and sum(len(t) for t in taus) else 1.0


def router_kl_divergence(paired):
    """Diagnostic only: mean KL(p_f || p_b) over every (layer, token)."""
    values = []
    for pair in paired:
        p_f = torch.as_tensor(pair.tuned.probs)
        p_b = torch.as_tensor(pair.base.probs)
        values.append(torch.special.xlogy(p_f, p_f).sum(-1) - torch.special.xlogy(p_f, p_b).sum(-1))

    if not values:
        raise ShapeError('router_kl_divergence needs at least one paired trace')

    return float(torch.cat([v.reshape(-1) for v in values]).mean())
