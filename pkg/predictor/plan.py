from dataclasses import dataclass

import numpy as np

from utils.errors import ShapeError


@dataclass
class PrefetchPlan:
    """Per-layer expert ids to load before decoding; scores are kept for batch pooling."""
    sets: list
    scores: np.ndarray = None

    @property
    def L(self):
        return len(self.sets)


    def validate(self, E, C):
        for l, ids in enumerate(self.sets):
            if len(ids) != C or any(i < 0 or i >= E for i in ids):
                raise ShapeError(f'Prefetch set for layer {l} must hold C={C} ids below E={E}, got {sorted(ids)}')

        return self


    def to_dict(self):
        return {'sets': [sorted(int(i) for i in s) for s in self.sets]}


def plan_from_scores(scores, C):
    """Top-C ids per row, lower index first on ties."""
    scores = np.asarray(scores, dtype=np.float64)
    L, E = scores.shape

    if C < 1 or C > E:
        raise ShapeError(f'Prefetch capacity must satisfy 1 <= C <= E, got C={C}, E={E}')

    sets = [frozenset(np.argsort(-row, kind='stable')[:C].tolist()) for row in scores]
    return PrefetchPlan(sets=sets, scores=scores)


def random_prefetch(L, E, C, rng):
    return PrefetchPlan(sets=[frozenset(rng.choice(E, size=C, replace=False).tolist()) for _ in range(L)])


def oracle_prefetch(trace, C):
    """Top-C experts per layer by how often the trace requested them.

    Mean router probability (always below 1) only breaks count ties.
    """
    return plan_from_scores(trace.requests.sum(axis=1) + trace.probs.mean(axis=1), C)


def prefetch_hit_rate(plan, trace):
    hits, total = 0, 0
    for l in range(trace.L):
        requested = trace.requests[l].nonzero()[1]
        hits += sum(1 for i in requested if i in plan.sets[l])
        total += len(requested)

    return hits / total if total else 1.0
