import logging
from dataclasses import dataclass

import numpy as np
from tqdm import tqdm

from moe.model import greedy_decode
from predictor.embedding import DEFAULT_DAMPING, DEFAULT_DIM, embed_prompt
from utils.errors import LocalityError, ShapeError

logger = logging.getLogger('locality.predictor')


@dataclass
class PredictorExample:
    embedding: np.ndarray
    target: np.ndarray
    prompt: list = None

    def to_record(self):
        return {'embedding': self.embedding.tolist(), 'target': self.target.tolist()}


    @classmethod
    def from_record(cls, record):
        return cls(embedding=np.asarray(record['embedding']), target=np.asarray(record['target']))


class PredictorDataset(list):
    skipped = 0


def normalize_rows(Y):
    Y = np.asarray(Y, dtype=np.float64)
    return Y / Y.sum(axis=-1, keepdims=True)


def preference_target(trace, n_prompt):
    """Mean router probability per layer over the generated positions, rows renormalized."""
    generated = trace.probs[:, n_prompt:]
    if generated.shape[1] == 0:
        raise ShapeError('No generated positions to average')

    return normalize_rows(generated.mean(axis=1))


def build_targets(model, prompts, gen_len, d_emb=DEFAULT_DIM, damping=DEFAULT_DAMPING):
    if gen_len < 1:
        raise ShapeError(f'gen_len must be >= 1, got {gen_len}')

    dataset = PredictorDataset()
    for prompt in tqdm(prompts, desc='targets', disable=len(prompts) < 50):
        try:
            result = greedy_decode(model, prompt, gen_len)
            dataset.append(PredictorExample(
                embedding=embed_prompt(prompt, d_emb=d_emb, damping=damping),
                target=preference_target(result.trace, result.n_prompt),
                prompt=list(prompt)
            ))
        except LocalityError as e:
            logger.debug(f'Skipping prompt {prompt}: {e}')
            dataset.skipped += 1

    if dataset.skipped:
        logger.warning(f'Skipped {dataset.skipped} of {len(prompts)} prompts while building predictor targets')

    return dataset
