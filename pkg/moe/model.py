import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from moe.config import ModelConfig
from moe.layers import DTYPE, MoELayer
from moe.trace import RoutingTrace
from utils.errors import ShapeError

logger = logging.getLogger('locality.moe')


class MoEModel(nn.Module):
    """Token embedding -> L residual MoE layers -> output head. No attention, so a
    position's routing depends only on its own token."""

    def __init__(self, config: ModelConfig, generator=None):
        super().__init__()
        self.config = config
        self.embed = nn.Parameter(torch.randn(config.V, config.d, generator=generator, dtype=DTYPE))
        self.layers = nn.ModuleList([
            MoELayer(d=config.d, d_ff=config.d_ff, E=config.E, phi=config.phi, generator=generator)
            for _ in range(config.L)
        ])
        self.head = nn.Parameter(torch.randn(config.V, config.d, generator=generator, dtype=DTYPE) / math.sqrt(config.d))


    def check_tokens(self, tokens):
        tokens = torch.as_tensor(tokens, dtype=torch.long)

        if tokens.numel() and (tokens.min() < 0 or tokens.max() >= self.config.V):
            raise ShapeError(f'Token ids must lie in [0, {self.config.V}), got {tokens.tolist()}')

        if tokens.shape[-1] > self.config.T_max:
            raise ShapeError(f'Sequence length {tokens.shape[-1]} exceeds T_max={self.config.T_max}')

        return tokens


    def forward(self, tokens):
        """tokens (T,) or (B, T) -> logits (..., T, V), probs and requests (..., L, T, E)."""
        tokens = self.check_tokens(tokens)
        lead = tokens.shape
        h = self.embed[tokens.reshape(-1)]

        probs, requests = [], []
        for layer in self.layers:
            y, p, r = layer(h, self.config.K, routing_mode=self.config.routing_mode)
            h = h + y
            probs.append(p.reshape(*lead, self.config.E))
            requests.append(r.reshape(*lead, self.config.E))

        logits = (h @ self.head.T).reshape(*lead, self.config.V)
        # layer axis goes just before the token axis
        return logits, torch.stack(probs, dim=-3), torch.stack(requests, dim=-3)


def model_forward(m: MoEModel, tokens):
    with torch.no_grad():
        logits, probs, requests = m(tokens)

    if probs.dim() != 3:
        raise ShapeError('model_forward takes a single sequence, use MoEModel.forward for batches')

    return logits, RoutingTrace(probs=probs.numpy(), requests=requests.numpy())


def nll_loss(logits, targets):
    targets = torch.as_tensor(targets, dtype=torch.long)
    V = logits.shape[-1]

    if targets.numel() and (targets.min() < 0 or targets.max() >= V):
        raise ShapeError(f'Target ids must lie in [0, {V})')

    return F.cross_entropy(logits.reshape(-1, V), targets.reshape(-1))


@dataclass
class DecodeResult:
    prompt: list
    generated: list
    trace: RoutingTrace

    @property
    def n_prompt(self):
        return len(self.prompt)


def _route(model, tokens):
    with torch.no_grad():
        return model(tokens)


def decode_steps(model: MoEModel, prompt, max_tokens: int):
    """Yields (phase, token, probs (L, E), requests (L, E)) for every processed
    position: the prompt positions ('prefill') then one per generated token ('decode')."""
    prompt = [int(t) for t in prompt]
    if not prompt:
        raise ShapeError('Cannot decode from an empty prompt')

    logits, probs, requests = _route(model, prompt)
    for t, token in enumerate(prompt):
        yield 'prefill', token, probs[:, t].numpy(), requests[:, t].numpy()

    for _ in range(max_tokens):
        # argmax returns the first maximal index
        next_token = int(torch.argmax(logits[-1]))
        logits, probs, requests = _route(model, [next_token])
        yield 'decode', next_token, probs[:, 0].numpy(), requests[:, 0].numpy()


def greedy_decode(model: MoEModel, prompt, max_tokens: int) -> DecodeResult:
    """Greedy argmax continuation. The trace covers prompt positions then one
    position per generated token."""
    generated, probs, requests = [], [], []

    for phase, token, p, r in decode_steps(model, prompt, max_tokens):
        if phase == 'decode':
            generated.append(token)

        probs.append(p)
        requests.append(r)

    trace = RoutingTrace(probs=np.stack(probs, axis=1), requests=np.stack(requests, axis=1))
    return DecodeResult(prompt=[int(t) for t in prompt], generated=generated, trace=trace)


@dataclass
class RoutingStats:
    frequency: np.ndarray
    unique_per_sequence: np.ndarray
    usage_entropy: np.ndarray


def routing_statistics(traces) -> RoutingStats:
    """Per-layer expert usage: activation share (L x E), mean distinct experts
    touched per sequence (L,), and entropy of the global usage share (L,)."""
    if not traces:
        raise ShapeError('routing_statistics needs at least one trace')

    L, E = traces[0].L, traces[0].E
    totals = np.zeros((L, E))
    unique = np.zeros(L)

    for trace in traces:
        counts = trace.requests.sum(axis=1)
        totals += counts
        unique += (counts > 0).sum(axis=1)

    share = totals / np.maximum(totals.sum(axis=1, keepdims=True), 1)
    with np.errstate(divide='ignore', invalid='ignore'):
        entropy = -np.where(share > 0, share * np.log(share), 0.0).sum(axis=1)

    return RoutingStats(frequency=share, unique_per_sequence=unique / len(traces), usage_entropy=entropy)


def top_experts(trace: RoutingTrace, n: int):
    counts = trace.requests.sum(axis=1)
    return [set(np.argsort(-row, kind='stable')[:n].tolist()) for row in counts]


def jaccard(a, b):
    union = a | b
    return len(a & b) / len(union) if union else 1.0
