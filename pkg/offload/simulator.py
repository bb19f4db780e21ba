import logging
from dataclasses import dataclass, field

import numpy as np

from cache.policies import PolicySpec, make_policy
from moe.model import decode_steps
from moe.trace import RoutingTrace
from offload.latency import LatencyModel, latency_estimate
from predictor.plan import PrefetchPlan, plan_from_scores
from utils.errors import ShapeError

logger = logging.getLogger('locality.offload')


@dataclass
class DecodeReport:
    generated: list
    prompt_len: int
    policy: str
    C: int
    prefetched: bool
    misses: np.ndarray
    evictions: np.ndarray
    requests: np.ndarray
    prefill_misses: np.ndarray
    estimated_seconds: float
    trace: RoutingTrace = field(default=None, repr=False)
    plan: PrefetchPlan = field(default=None, repr=False)

    @property
    def tokens(self):
        return len(self.generated)

    @property
    def n_miss(self):
        return int(self.misses.sum())

    @property
    def transfers_per_layer(self):
        return self.n_miss / len(self.misses) if len(self.misses) else 0.0

    @property
    def throughput(self):
        return self.tokens / self.estimated_seconds if self.estimated_seconds > 0 else 0.0

    @property
    def hit_rate(self):
        total = int(self.requests.sum())
        return 1.0 - self.n_miss / total if total else 1.0


    def to_dict(self):
        return {
            'generated': list(self.generated),
            'tokens': self.tokens,
            'prompt_len': self.prompt_len,
            'policy': self.policy,
            'C': self.C,
            'prefetched': self.prefetched,
            'misses_per_layer': self.misses.tolist(),
            'prefill_misses_per_layer': self.prefill_misses.tolist(),
            'evictions_per_layer': self.evictions.tolist(),
            'n_miss': self.n_miss,
            'transfers_per_layer': self.transfers_per_layer,
            'estimated_seconds': self.estimated_seconds,
            'throughput_tokens_per_s': self.throughput,
            'hit_rate': self.hit_rate,
        }


def effective_capacity(C, E, capacity_multiplier=1.0):
    """Resident experts per layer when compressed experts fit capacity_multiplier times as many."""
    C_eff = int(round(C * capacity_multiplier))

    if C_eff < 1:
        raise ShapeError(f'Cache capacity must be >= 1, got C={C} x {capacity_multiplier}')

    return min(E, C_eff)


class LayerCaches:
    """One eviction-policy cache per layer plus miss, eviction and request tallies."""

    def __init__(self, policy, L, E, C, plan=None):
        if plan is not None:
            plan.validate(E, C)
            if plan.L != L:
                raise ShapeError(f'Prefetch plan covers {plan.L} layers, model has {L}')

        inits = plan.sets if plan is not None else [None] * L
        self.caches = [make_policy(policy, E=E, C=C, init=inits[l]) for l in range(L)]
        self.misses = np.zeros(L, dtype=np.int64)
        self.evictions = np.zeros(L, dtype=np.int64)
        self.requests = np.zeros(L, dtype=np.int64)


    def step(self, requests):
        for l, cache in enumerate(self.caches):
            m, ev = cache.step(requests[l])
            self.misses[l] += m
            self.evictions[l] += ev
            self.requests[l] += int(np.count_nonzero(requests[l]))


def simulate_decode(model, prompt, policy, C, prefetch: PrefetchPlan = None, lat: LatencyModel = None,
                    max_tokens=32, capacity_multiplier=1.0) -> DecodeReport:
    """Greedy decode with a per-layer resident cache. Prefill positions are
    charged like decode positions."""
    return simulate_batch_decode(
        model=model,
        prompts=[prompt],
        policy=policy,
        C=C,
        plans=None if prefetch is None else [prefetch],
        lat=lat,
        max_tokens=max_tokens,
        capacity_multiplier=capacity_multiplier
    )


def pool_plans(plans, L, E, C):
    """Per-layer Top-C of predicted scores summed across the batch. Set-only plans
    count as indicator scores, so a plan narrower than C is widened by index."""
    total = np.zeros((L, E))
    for plan in plans:
        if plan.L != L:
            raise ShapeError(f'Prefetch plan covers {plan.L} layers, model has {L}')

        if plan.scores is not None:
            scores = np.asarray(plan.scores)
        else:
            scores = np.zeros((L, E))
            for l, ids in enumerate(plan.sets):
                scores[l, sorted(ids)] = 1.0

        if scores.shape != (L, E):
            raise ShapeError(f'Prefetch scores {scores.shape} do not match the model ({L}, {E})')

        total += scores

    return plan_from_scores(total, C)


def _phase_streams(model, prompts, max_tokens):
    prefill, decode, generated = [], [], []

    for prompt in prompts:
        steps = list(decode_steps(model, prompt, max_tokens))
        prefill.append([(p, r) for phase, _, p, r in steps if phase == 'prefill'])
        decode.append([(p, r) for phase, _, p, r in steps if phase == 'decode'])
        generated.append([token for phase, token, _, _ in steps if phase == 'decode'])

    return prefill, decode, generated


def _union_steps(streams, L, E):
    length = max((len(s) for s in streams), default=0)
    probs, requests = [], []

    for step in range(length):
        active = [s[step] for s in streams if step < len(s)]
        probs.append(np.mean([p for p, _ in active], axis=0))
        requests.append(np.max([r for _, r in active], axis=0))

    return probs, requests


def simulate_batch_decode(model, prompts, policy, C, plans=None, lat: LatencyModel = None,
                          max_tokens=32, capacity_multiplier=1.0) -> DecodeReport:
    """Decodes a batch against one shared cache per layer; each step requests the
    union of the sequences' experts and the prefetch pools everyone's scores."""
    prompts = list(prompts)
    if not prompts:
        raise ShapeError('Batch decode needs at least one prompt')

    lat = lat or LatencyModel()
    spec = PolicySpec.parse(policy)
    L, E = model.config.L, model.config.E
    C_eff = effective_capacity(C, E, capacity_multiplier)

    plan = None
    if plans:
        if len(plans) != len(prompts):
            raise ShapeError(f'Got {len(plans)} prefetch plans for {len(prompts)} prompts')

        for p in plans:
            if p.scores is None:
                p.validate(E, C_eff if all(len(ids) == C_eff for ids in p.sets) else C)

        plan = pool_plans(plans, L, E, C_eff)

    if max_tokens == 0:
        zeros = np.zeros(L, dtype=np.int64)
        return DecodeReport(
            generated=[],
            prompt_len=max(len(p) for p in prompts),
            policy=spec.label,
            C=C_eff,
            prefetched=plan is not None,
            misses=zeros,
            evictions=zeros.copy(),
            requests=zeros.copy(),
            prefill_misses=zeros.copy(),
            estimated_seconds=0.0,
            trace=RoutingTrace(probs=np.zeros((L, 0, E)), requests=np.zeros((L, 0, E))),
            plan=plan
        )

    caches = LayerCaches(spec, L=L, E=E, C=C_eff, plan=plan)
    prefill, decode, generated = _phase_streams(model, prompts, max_tokens)
    prefill_probs, prefill_requests = _union_steps(prefill, L, E)
    decode_probs, decode_requests = _union_steps(decode, L, E)

    for r in prefill_requests:
        caches.step(r)

    prefill_misses = caches.misses.copy()

    for r in decode_requests:
        caches.step(r)

    steps = len(decode_requests)
    seconds = latency_estimate(int(caches.misses.sum()), steps, lat, prefetched=plan is not None)
    trace = RoutingTrace(
        probs=np.stack(prefill_probs + decode_probs, axis=1),
        requests=np.stack(prefill_requests + decode_requests, axis=1)
    )
    tokens = [t for seq in generated for t in seq]

    report = DecodeReport(
        generated=tokens,
        prompt_len=len(prefill_requests),
        policy=spec.label,
        C=C_eff,
        prefetched=plan is not None,
        misses=caches.misses,
        evictions=caches.evictions,
        requests=caches.requests,
        prefill_misses=prefill_misses,
        estimated_seconds=seconds,
        trace=trace,
        plan=plan
    )
    logger.debug(f'Decoded {report.tokens} tokens with {report.n_miss} transfers under {spec.label}, C={C_eff}')
    return report
