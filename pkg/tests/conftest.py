import copy

import numpy as np
import pytest

from moe.config import ModelConfig
from moe.layers import top_k_select
from moe.model import MoEModel
from moe.trace import RoutingTrace
from utils.seeds import torch_generator

SMALL_CONFIG = {
    'schema_version': 1,
    'seed': 0,
    'workers': 1,
    'model': {'L': 2, 'E': 8, 'K': 2, 'd': 8, 'd_ff': 12, 'V': 16, 'T_max': 64},
    'data': {'n_topics': 2, 'V': 16, 'seqs_per_topic': 8, 'T': 12, 'concentration': 20.0, 'val_fraction': 0.25},
    'pretrain': {'epochs': 2, 'learning_rate': 0.003, 'batch_size': 4},
    'train': {
        'learning_rate': 0.001,
        'epochs': 2,
        'batch_size': 4,
        'val_sequences': 4,
        'weights': {'lambda_cs': 0.5, 'lambda_rm': 0.1, 'gamma': 0.9, 'C_sim': 3},
    },
    'predictor': {'d_emb': 16, 'hidden': 16, 'epochs': 5, 'batch_size': 4},
    'simulate': {'policy': 'lfu', 'C': 3, 'max_tokens': 6, 'prompt_len': 4, 'target_gen_len': 6, 'n_eval_prompts': 3},
    'sweep': {
        'lambda_cs': [0.5],
        'lambda_rm': [0.1],
        'train_gamma': [0.9],
        'c_sim': [3],
        'policy': ['lfu'],
        'C': [3],
        'max_tokens': [6],
        'prefetch': [True],
    },
}


def random_trace(rng, L, T, E, K):
    """Dirichlet router probabilities with their Top-K requests."""
    probs = rng.dirichlet(np.ones(E), size=(L, T))
    requests = top_k_select(probs, K).numpy()
    return RoutingTrace(probs=probs, requests=requests)


@pytest.fixture
def tiny_config():
    return ModelConfig(L=2, E=4, K=2, d=4, d_ff=6, V=8, T_max=32, phi='relu')


@pytest.fixture
def tiny_model(tiny_config):
    return MoEModel(tiny_config, generator=torch_generator(0, 'init'))


@pytest.fixture
def small_model():
    config = ModelConfig(**SMALL_CONFIG['model'])
    return MoEModel(config, generator=torch_generator(0, 'init'))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def cfg_json(tmp_path):
    cfg = copy.deepcopy(SMALL_CONFIG)
    cfg['out'] = str(tmp_path / 'run')
    return cfg
