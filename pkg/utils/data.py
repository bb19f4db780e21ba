import logging
from dataclasses import dataclass, asdict
from itertools import zip_longest

import numpy as np

from utils.errors import ConfigError
from utils.seeds import rng_for

logger = logging.getLogger('locality.data')

MIN_SUPPORT = 4


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    n_topics: int = 2
    V: int = 64
    seqs_per_topic: int = 64
    T: int = 32
    concentration: float = 20.0
    seed: int = 0

    def __post_init__(self):
        if self.n_topics < 1 or self.seqs_per_topic < 1 or self.T < 1:
            raise ConfigError('data.n_topics, data.seqs_per_topic and data.T must be >= 1')

        if self.V < self.n_topics * MIN_SUPPORT:
            raise ConfigError(f'data.V={self.V} is too small for {self.n_topics} topics of {MIN_SUPPORT} tokens each')

        if self.concentration < 0:
            raise ConfigError(f'data.concentration must be >= 0, got {self.concentration}')


    def to_dict(self):
        return asdict(self)


@dataclass
class Sequence:
    tokens: np.ndarray
    targets: np.ndarray
    topic: int

    def prompt(self, length):
        return self.tokens[:length].tolist()


    def to_record(self):
        return {'tokens': self.tokens.tolist(), 'targets': self.targets.tolist(), 'topic': self.topic}


    @classmethod
    def from_record(cls, record):
        return cls(
            tokens=np.asarray(record['tokens'], dtype=np.int64),
            targets=np.asarray(record['targets'], dtype=np.int64),
            topic=int(record['topic'])
        )


def topic_distributions(spec: SyntheticDatasetSpec):
    """Each topic owns a disjoint block of the vocabulary; concentration moves
    mass from the uniform distribution onto that block."""
    rng = rng_for(spec.seed, 'data', 0)
    block = spec.V // spec.n_topics
    mix = spec.concentration / (1.0 + spec.concentration)
    uniform = np.full(spec.V, 1.0 / spec.V)

    dists = []
    for k in range(spec.n_topics):
        focused = np.zeros(spec.V)
        focused[k * block:(k + 1) * block] = rng.dirichlet(np.ones(block))
        dists.append(mix * focused + (1.0 - mix) * uniform)

    return np.stack(dists)


def generate_dataset(spec: SyntheticDatasetSpec):
    dists = topic_distributions(spec)
    rng = rng_for(spec.seed, 'data', 1)
    sequences = []

    for k in range(spec.n_topics):
        for _ in range(spec.seqs_per_topic):
            stream = rng.choice(spec.V, size=spec.T + 1, p=dists[k])
            sequences.append(Sequence(tokens=stream[:-1].astype(np.int64), targets=stream[1:].astype(np.int64), topic=k))

    order = rng_for(spec.seed, 'data', 2).permutation(len(sequences))
    logger.info(f'Generated {len(sequences)} sequences over {spec.n_topics} topics')
    return [sequences[i] for i in order]


def split_dataset(sequences, val_fraction=0.25):
    """Per-topic split so both halves cover every topic; each half interleaves
    the topics so any prefix of it is balanced."""
    train, val = [], []
    by_topic = {}

    for seq in sequences:
        by_topic.setdefault(seq.topic, []).append(seq)

    for topic in sorted(by_topic):
        group = by_topic[topic]
        n_val = max(1, int(round(len(group) * val_fraction))) if len(group) > 1 else 0
        train.append(group[:len(group) - n_val])
        val.append(group[len(group) - n_val:])

    return _interleave(train), _interleave(val)


def _interleave(groups):
    return [seq for row in zip_longest(*groups) for seq in row if seq is not None]
