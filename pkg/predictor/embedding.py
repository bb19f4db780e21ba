import hashlib

import numpy as np

from utils.errors import ShapeError

DEFAULT_DIM = 64
DEFAULT_DAMPING = 0.9
HASHES_PER_TOKEN = 2


def _token_features(token, d_emb):
    """Signed hashed buckets for one token id; stable across runs and platforms."""
    features = []
    for k in range(HASHES_PER_TOKEN):
        digest = hashlib.blake2b(f'{k}:{int(token)}'.encode(), digest_size=8).digest()
        h = int.from_bytes(digest, 'little')
        features.append((h % d_emb, 1.0 if (h >> 40) & 1 else -1.0))

    return features


def embed_prompt(tokens, d_emb=DEFAULT_DIM, damping=DEFAULT_DAMPING):
    """Hashed bag-of-tokens, token j weighted by damping**j, L2-normalized.

    damping=1 makes the embedding invariant to token order.
    """
    tokens = list(tokens)
    if not tokens:
        raise ShapeError('Cannot embed an empty prompt')

    v = np.zeros(d_emb)
    for j, token in enumerate(tokens):
        weight = damping ** j
        for bucket, sign in _token_features(token, d_emb):
            v[bucket] += sign * weight

    norm = np.linalg.norm(v)
    return v / norm if norm > 0 else v
