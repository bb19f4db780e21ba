from dataclasses import dataclass

import numpy as np

from utils.errors import ShapeError

PROB_TOL = 1e-6


@dataclass
class RoutingTrace:
    """Router probabilities and Top-K requests for one sequence, indexed (layer, token, expert)."""
    probs: np.ndarray
    requests: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.requests = np.asarray(self.requests, dtype=np.int8)

        if self.probs.ndim != 3 or self.probs.shape != self.requests.shape:
            raise ShapeError(f'Trace probs {self.probs.shape} and requests {self.requests.shape} must both be L x T x E')

    @property
    def L(self):
        return self.probs.shape[0]

    @property
    def T(self):
        return self.probs.shape[1]

    @property
    def E(self):
        return self.probs.shape[2]

    @property
    def K(self):
        if self.T == 0:
            return 0

        return int(self.requests[0, 0].sum())

    @property
    def shape(self):
        return self.probs.shape


    def validate(self):
        sums = self.probs.sum(axis=-1)
        if self.probs.size and (np.abs(sums - 1.0) > PROB_TOL).any():
            raise ShapeError('Trace probabilities must sum to 1 on every (layer, token)')

        if ((self.requests != 0) & (self.requests != 1)).any():
            raise ShapeError('Trace requests must be binary')

        counts = self.requests.sum(axis=-1)
        if counts.size and (counts != self.K).any():
            raise ShapeError('Trace requests must select the same K experts count on every (layer, token)')

        return self


    def slice_tokens(self, start, stop=None):
        return RoutingTrace(probs=self.probs[:, start:stop], requests=self.requests[:, start:stop])


    def request_indices(self):
        return [[np.flatnonzero(self.requests[l, t]).tolist() for t in range(self.T)] for l in range(self.L)]


    def to_record(self):
        return {
            'L': self.L,
            'T': self.T,
            'E': self.E,
            'probs': self.probs.tolist(),
            'requests': self.request_indices(),
        }


    @classmethod
    def from_record(cls, record):
        probs = np.asarray(record['probs'], dtype=np.float64).reshape(record['L'], record['T'], record['E'])
        requests = np.zeros(probs.shape, dtype=np.int8)

        for l, per_layer in enumerate(record['requests']):
            for t, idx in enumerate(per_layer):
                requests[l, t, idx] = 1

        return cls(probs=probs, requests=requests)


    @classmethod
    def concat(cls, traces):
        return cls(
            probs=np.concatenate([t.probs for t in traces], axis=1),
            requests=np.concatenate([t.requests for t in traces], axis=1)
        )


def stack_traces(traces):
    """Stack same-shaped traces into (N, L, T, E) request and probability arrays."""
    if not traces:
        raise ShapeError('At least one trace is required')

    shape = traces[0].shape
    if any(t.shape != shape for t in traces):
        raise ShapeError(f'All traces must share the shape {shape}')

    return np.stack([t.requests for t in traces]).astype(np.float64), np.stack([t.probs for t in traces])
