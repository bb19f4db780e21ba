import json
import logging
from dataclasses import dataclass, field, fields, replace

from cache.policies import PolicySpec
from losses.objective import LossWeights
from moe.config import ModelConfig
from offload.latency import LatencyModel
from predictor.mlp import PredictorConfig
from trainer.train import TrainConfig
from utils.data import SyntheticDatasetSpec
from utils.errors import ConfigError

logger = logging.getLogger('locality.config')

SCHEMA_VERSION = 1

REQUIRED = {
    'model': ('L', 'E', 'K', 'd', 'd_ff', 'V'),
    'data': ('n_topics', 'seqs_per_topic', 'T'),
    'train': ('epochs', 'learning_rate', 'batch_size'),
}


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 20
    learning_rate: float = 3e-3
    batch_size: int = 8


@dataclass(frozen=True)
class SimulateConfig:
    policy: str = 'lfu'
    C: int = 4
    max_tokens: int = 32
    capacity_multiplier: float = 1.0
    prompt_len: int = 8
    target_gen_len: int = 32
    n_eval_prompts: int = 50
    batch_size: int = 1
    calibrate_compute: bool = False
    latency: LatencyModel = field(default_factory=LatencyModel)

    def __post_init__(self):
        _check_policy('simulate.policy', self.policy)

        if self.C < 1 or self.prompt_len < 1 or self.max_tokens < 0:
            raise ConfigError('simulate.C and simulate.prompt_len must be >= 1, simulate.max_tokens >= 0')

        if self.batch_size < 1:
            raise ConfigError(f'simulate.batch_size must be >= 1, got {self.batch_size}')


@dataclass(frozen=True)
class SweepConfig:
    lambda_cs: tuple = (0.0, 0.5)
    lambda_rm: tuple = (0.0, 0.1)
    train_gamma: tuple = (0.9,)
    c_sim: tuple = (4,)
    policy: tuple = ('lfu',)
    C: tuple = (4,)
    max_tokens: tuple = (32,)
    prefetch: tuple = (True,)

    def __post_init__(self):
        for f in fields(self):
            if len(getattr(self, f.name)) == 0:
                raise ConfigError(f'sweep.{f.name} grid is empty')

        for policy in self.policy:
            _check_policy('sweep.policy', policy)


def _check_policy(section, text):
    try:
        PolicySpec.parse(text)
    except ValueError as e:
        raise ConfigError(f'{section}: {e}') from e


def _build(cls, section, data, required=()):
    if not isinstance(data, dict):
        raise ConfigError(f'Config section {section} must be an object')

    for name in required:
        if name not in data:
            raise ConfigError(f'Missing config field {section}.{name}')

    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f'Unknown config field {section}.{unknown[0]}')

    return cls(**data)


class Config:
    def __init__(self, cfg_json, out_dir=None, seed=None, workers=None):
        if 'schema_version' not in cfg_json:
            raise ConfigError('Missing config field schema_version')

        if cfg_json['schema_version'] != SCHEMA_VERSION:
            raise ConfigError(f'Unsupported schema_version {cfg_json["schema_version"]}, expected {SCHEMA_VERSION}')

        self.cfg_json = cfg_json
        self.seed = int(seed if seed is not None else cfg_json.get('seed', 0))
        self.workers = int(workers if workers is not None else cfg_json.get('workers', 1))
        self.out_dir = out_dir or cfg_json.get('out', 'runs/default')

        self.model = _build(ModelConfig, 'model', self._section('model'), REQUIRED['model'])
        self.data = self._data_spec()
        if self.data.V != self.model.V:
            raise ConfigError(f'data.V ({self.data.V}) must equal model.V ({self.model.V})')

        self.val_fraction = float(self._section('data').get('val_fraction', 0.25))
        self.pretrain = _build(PretrainConfig, 'pretrain', cfg_json.get('pretrain', {}))
        self.train = self._train_config()
        self.predictor = self._predictor_config()
        self.simulate = self._simulate_config()
        self.sweep = self._sweep_config()


    @classmethod
    def load(cls, path, **overrides):
        logger.info(f'Loading config from {path}')

        with open(path, 'r', encoding='utf-8') as json_file:
            try:
                cfg_json = json.load(json_file)
            except json.JSONDecodeError as e:
                raise ConfigError(f'{path} is not valid JSON: {e}') from e

        return cls(cfg_json=cfg_json, **overrides)


    def _section(self, name):
        if name not in self.cfg_json:
            raise ConfigError(f'Missing config field {name}')

        return self.cfg_json[name]


    def _data_spec(self):
        data = {k: v for k, v in self._section('data').items() if k != 'val_fraction'}
        return _build(SyntheticDatasetSpec, 'data', {**data, 'seed': self.seed}, REQUIRED['data'])


    def _train_config(self):
        train = dict(self._section('train'))
        weights = _build(LossWeights, 'train.weights', train.pop('weights', {}))
        return _build(TrainConfig, 'train', {**train, 'weights': weights, 'seed': self.seed}, REQUIRED['train'])


    def _predictor_config(self):
        return _build(PredictorConfig, 'predictor', {**self.cfg_json.get('predictor', {}), 'seed': self.seed})


    def _simulate_config(self):
        simulate = dict(self.cfg_json.get('simulate', {}))
        latency = _build(LatencyModel, 'simulate.latency', simulate.pop('latency', {}))
        return _build(SimulateConfig, 'simulate', {**simulate, 'latency': latency})


    def _sweep_config(self):
        sweep = {k: tuple(v) for k, v in self.cfg_json.get('sweep', {}).items()}
        return _build(SweepConfig, 'sweep', sweep)


    def with_train(self, **changes):
        """Copy of the train section with replaced fields (weights given as a dict are merged)."""
        weights = changes.pop('weights', None)
        if isinstance(weights, dict):
            weights = replace(self.train.weights, **weights)

        return replace(self.train, **changes, **({'weights': weights} if weights is not None else {}))
