import logging
from dataclasses import dataclass

import numpy as np
import torch

from cache.soft import DEFAULT_BPTT_WINDOW, soft_cache_loss
from losses.objective import LossWeights, total_loss
from losses.ranking import rank_mistakes
from moe.model import nll_loss
from utils.errors import ConfigError

logger = logging.getLogger('locality.trainer')

GRAD_MODES = ('soft_route', 'straight_through')
PARAM_POLICIES = ('routing', 'all')


@dataclass
class LossComponents:
    nll: float
    lcs: float
    lrm: float
    total: float


@dataclass
class GradientReport:
    grads: dict
    global_norm: float


def is_trainable(name, policy):
    """'routing': router weights, gate projections and LoRA adapters. 'all': every base weight."""
    if policy == 'all':
        return '.adapters.' not in name

    return name.endswith('W_r') or name.endswith('W_g') or '.adapters.' in name


def set_trainable(model, policy='routing'):
    if policy not in PARAM_POLICIES:
        raise ConfigError(f'Unknown parameter policy {policy!r}, expected one of {PARAM_POLICIES}')

    for name, param in model.named_parameters():
        param.requires_grad_(is_trainable(name, policy))

    return [p for p in model.parameters() if p.requires_grad]


def request_surrogate(probs, requests, K, grad_mode):
    """What the cache loss sees in place of the binary requests."""
    if grad_mode == 'soft_route':
        # scaled so every row carries mass K, like a binary Top-K row
        return K * probs

    if grad_mode == 'straight_through':
        return requests + probs - probs.detach()

    raise ConfigError(f'Unknown grad mode {grad_mode!r}, expected one of {GRAD_MODES}')


def objective(model, tokens, targets, weights: LossWeights, grad_mode='soft_route', base_model=None,
              cache_init='uniform', bptt_window=DEFAULT_BPTT_WINDOW):
    """Returns (total, nll, lcs, lrm) tensors for a (B, T) or (T,) batch."""
    K = model.config.K
    logits, probs, requests = model(tokens)
    nll = nll_loss(logits, targets)

    surrogate = request_surrogate(probs, requests, K, grad_mode)
    if weights.lambda_cs == 0:
        surrogate = surrogate.detach()

    lcs = soft_cache_loss(surrogate, weights.gamma, weights.C_sim, init=cache_init, K=K, bptt_window=bptt_window)

    if base_model is not None:
        with torch.no_grad():
            _, base_probs, _ = base_model(tokens)

        tuned = probs if weights.lambda_rm > 0 else probs.detach()
        lrm = rank_mistakes(base_probs, tuned, weights.rho).mean()
    else:
        lrm = torch.zeros((), dtype=nll.dtype)

    total = nll
    if weights.lambda_cs > 0 or weights.lambda_rm > 0:
        total = total_loss(nll, lcs, lrm, weights)
    else:
        total_loss(nll.detach(), lcs.detach(), lrm.detach(), weights)

    return total, nll, lcs, lrm


def backward(model, batch, weights: LossWeights, grad_mode='soft_route', base_model=None, cache_init='uniform'):
    """Gradients of nll + lambda_cs * lcs + lambda_rm * lrm. Frozen parameters report zeros."""
    tokens, targets = batch
    model.zero_grad(set_to_none=True)

    total, nll, lcs, lrm = objective(
        model=model,
        tokens=tokens,
        targets=targets,
        weights=weights,
        grad_mode=grad_mode,
        base_model=base_model,
        cache_init=cache_init
    )
    total.backward()

    grads = {}
    squares = 0.0
    for name, param in model.named_parameters():
        if param.grad is None:
            grads[name] = np.zeros(tuple(param.shape))
        else:
            grads[name] = param.grad.detach().numpy().copy()
            squares += float((param.grad ** 2).sum())

    components = LossComponents(*(value.detach().item() for value in (nll, lcs, lrm, total)))
    return components, GradientReport(grads=grads, global_norm=squares ** 0.5)


def finite_difference_grad(loss_fn, params, epsilon=1e-5):
    """Central differences (f(theta + eps) - f(theta - eps)) / 2 eps, one coordinate at a time."""
    if epsilon <= 0:
        raise ValueError(f'epsilon must be positive, got {epsilon}')

    grads = []
    with torch.no_grad():
        for param in params:
            flat = param.view(-1)
            grad = np.zeros(flat.numel())

            for idx in range(flat.numel()):
                original = flat[idx].item()
                flat[idx] = original + epsilon
                upper = float(loss_fn())
                flat[idx] = original - epsilon
                lower = float(loss_fn())
                flat[idx] = original
                grad[idx] = (upper - lower) / (2 * epsilon)

            grads.append(grad.reshape(tuple(param.shape)))

    return grads
