import copy
import logging
from dataclasses import replace

from losses.objective import LossWeights
from moe.config import ModelConfig
from moe.model import MoEModel
from trainer.lora import attach_lora
from trainer.train import TrainConfig, Trainer, freeze_copy
from utils.data import Sequence, generate_dataset, split_dataset
from utils.errors import ConfigError
from utils.seeds import torch_generator

logger = logging.getLogger('locality.commands')

DATASET_FILE = 'dataset.jsonl'
BASE_CHECKPOINT = 'base.json'
CHECKPOINT = 'checkpoint.json'
PREDICTOR_CHECKPOINT = 'predictor.json'


def load_dataset(cfg, repo):
    """Reads dataset.jsonl when gen-data has run, otherwise regenerates it from the seed."""
    if repo.find('dataset') is not None:
        sequences = [Sequence.from_record(r) for r in repo.read_jsonl(DATASET_FILE)]
    else:
        sequences = generate_dataset(cfg.data)

    if any(len(s.tokens) > cfg.model.T_max for s in sequences):
        raise ConfigError(f'data.T exceeds model.T_max={cfg.model.T_max}')

    return split_dataset(sequences, val_fraction=cfg.val_fraction)


def pretrain_config(cfg) -> TrainConfig:
    return TrainConfig(
        learning_rate=cfg.pretrain.learning_rate,
        epochs=cfg.pretrain.epochs,
        batch_size=cfg.pretrain.batch_size,
        weights=LossWeights(lambda_cs=0.0, lambda_rm=0.0),
        seed=cfg.seed,
        param_policy='all',
        val_sequences=cfg.train.val_sequences
    )


def save_model(repo, filename, model, extra=None):
    lora = _lora_settings(model)
    return repo.save_checkpoint(
        filename=filename,
        kind='moe',
        config=model.config.to_dict(),
        module=model,
        extra={**(extra or {}), **lora}
    )


def _lora_settings(model):
    for layer in model.layers:
        for expert in layer.experts:
            if len(expert.adapters):
                adapter = expert.adapters['W_u']
                return {'lora_rank': adapter.rank, 'lora_alpha': adapter.scale * adapter.rank}

    return {}


def load_model(repo, filename):
    logger.info(f'Loading model checkpoint {filename}')
    config, params, extra = repo.load_checkpoint(filename, kind='moe')
    model = MoEModel(ModelConfig(**config))

    if extra.get('lora_rank'):
        attach_lora(model, rank=extra['lora_rank'], alpha=extra['lora_alpha'])

    model.load_state_dict(params)
    model.eval()
    return model, extra


def base_model(cfg, repo, train_set, val_set):
    """Pretrained base model, reused from base.json when present."""
    if repo.find('base') is not None:
        model, _ = load_model(repo, BASE_CHECKPOINT)
        if model.config == cfg.model:
            return model

        logger.warning('base.json was trained with a different model config, pretraining again')

    model = MoEModel(cfg.model, generator=torch_generator(cfg.seed, 'init'))
    pre_cfg = pretrain_config(cfg)

    if pre_cfg.epochs:
        logger.info(f'Pretraining base model for {pre_cfg.epochs} epochs')
        Trainer(model=model, cfg=pre_cfg).fit(train_set, val_set)

    model.eval()
    save_model(repo, BASE_CHECKPOINT, model)
    return model


def fine_tune_trainer(base, train_cfg):
    """A fresh copy of the base model plus a trainer holding the frozen base for rank matching."""
    model = copy.deepcopy(base)
    trainer = Trainer(model=model, cfg=train_cfg, base_model=freeze_copy(base))
    return model, trainer


def weights_for(train_cfg, **changes):
    return replace(train_cfg, weights=replace(train_cfg.weights, **changes))
