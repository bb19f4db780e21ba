import numpy as np
import torch

# Fixed ids keep sub-streams stable when new streams are added.
STREAMS = {
    'data': 0,
    'init': 1,
    'order': 2,
    'predictor': 3,
    'eval': 4,
    'prefetch': 5,
}


def _stream_id(name):
    if name not in STREAMS:
        raise KeyError(f'Unknown random stream {name}')

    return STREAMS[name]


def rng_for(seed: int, stream: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), _stream_id(stream), *[int(e) for e in extra]])


def torch_generator(seed: int, stream: str, *extra: int) -> torch.Generator:
    sub_seed = int(rng_for(seed, stream, *extra).integers(0, 2**62))
    gen = torch.Generator()
    gen.manual_seed(sub_seed)
    return gen
