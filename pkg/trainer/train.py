import copy
import logging
import math
import time
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
from tqdm import tqdm

from cache.policies import hard_miss_count
from losses.objective import LossWeights
from losses.ranking import PairedTrace, mean_kendall_tau
from moe.model import model_forward, nll_loss
from trainer.gradients import GRAD_MODES, objective, set_trainable
from trainer.lora import attach_lora
from utils.errors import ConfigError, NonFiniteError, TrainingDiverged
from utils.seeds import rng_for, torch_generator

logger = logging.getLogger('locality.trainer')


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 3
    batch_size: int = 8
    weights: LossWeights = field(default_factory=LossWeights)
    grad_mode: str = 'soft_route'
    lora_rank: int = None
    lora_alpha: float = 16.0
    seed: int = 0
    warmup_ratio: float = 0.03
    weight_decay: float = 0.01
    param_policy: str = 'routing'
    cache_init: str = 'uniform'
    val_sequences: int = 16

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigError(f'train.learning_rate must be >= 0, got {self.learning_rate}')

        if self.epochs < 0:
            raise ConfigError(f'train.epochs must be >= 0, got {self.epochs}')

        if self.batch_size < 1:
            raise ConfigError(f'train.batch_size must be >= 1, got {self.batch_size}')

        if self.grad_mode not in GRAD_MODES:
            raise ConfigError(f'Unknown train.grad_mode {self.grad_mode!r}, expected one of {GRAD_MODES}')


    def to_dict(self):
        return asdict(self)


@dataclass
class EpochMetrics:
    epoch: int
    l_nll: float
    l_cs: float
    l_rm: float
    val_nll: float
    transfers_per_layer: float
    transfers_by_layer: list
    kendall_tau: float
    wall_time_s: float = field(default=0.0, compare=False)

    def to_row(self):
        row = asdict(self)
        row['transfers_by_layer'] = ';'.join(f'{v:.6g}' for v in self.transfers_by_layer)
        return row


class MetricsHistory(list):
    COLUMNS = ('epoch', 'l_nll', 'l_cs', 'l_rm', 'val_nll', 'transfers_per_layer', 'transfers_by_layer',
               'kendall_tau', 'wall_time_s')

    def rows(self):
        return [m.to_row() for m in self]


    @classmethod
    def from_rows(cls, rows):
        history = cls()
        for row in rows:
            row = dict(row)
            by_layer = row['transfers_by_layer']
            row['transfers_by_layer'] = [float(v) for v in by_layer.split(';')] if isinstance(by_layer, str) else list(by_layer)
            history.append(EpochMetrics(**row))

        return history


def batch_tensors(sequences):
    tokens = torch.as_tensor(np.stack([s.tokens for s in sequences]), dtype=torch.long)
    targets = torch.as_tensor(np.stack([s.targets for s in sequences]), dtype=torch.long)
    return tokens, targets


def validation_metrics(model, sequences, weights: LossWeights, base_model=None):
    """Teacher-forced NLL, gamma-cache transfers per layer and router rank agreement on a held-out slice."""
    if not sequences:
        return float('nan'), np.zeros(model.config.L), 1.0

    nlls, transfers, pairs = [], [], []
    for seq in sequences:
        logits, trace = model_forward(model, seq.tokens)
        nlls.append(float(nll_loss(logits, seq.targets)))
        transfers.append(hard_miss_count(trace, weights.gamma, weights.C_sim).misses)

        if base_model is not None:
            _, base_trace = model_forward(base_model, seq.tokens)
            pairs.append(PairedTrace(base=base_trace, tuned=trace))

    tau = mean_kendall_tau(pairs) if pairs else 1.0
    return float(np.mean(nlls)), np.mean(transfers, axis=0), tau


class Trainer:
    def __init__(self, model, cfg: TrainConfig, base_model=None):
        self.model = model
        self.cfg = cfg
        self.base_model = base_model
        self.history = MetricsHistory()
        self.epoch = 0

        if cfg.lora_rank and cfg.param_policy == 'routing' and not self._has_adapters():
            attach_lora(model, rank=cfg.lora_rank, alpha=cfg.lora_alpha, generator=torch_generator(cfg.seed, 'init', 1))

        self.params = set_trainable(model, cfg.param_policy)
        self.optimizer = torch.optim.AdamW(self.params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
        self.scheduler = None


    def _has_adapters(self):
        return any(len(e.adapters) for layer in self.model.layers for e in layer.experts)


    def _make_scheduler(self, steps_per_epoch):
        total = max(1, self.cfg.epochs * steps_per_epoch)
        warmup = int(self.cfg.warmup_ratio * total)

        def lr_factor(step):
            if step < warmup:
                return (step + 1) / warmup

            return max(0.0, (total - step) / max(1, total - warmup))

        return torch.optim.lr_scheduler.LambdaLR(self.optimizer, lr_lambda=lr_factor)


    def fit(self, train_set, val_set=(), until=None):
        """Runs the remaining epochs, stopping after epoch `until` when given."""
        if not train_set:
            raise ConfigError('Training dataset is empty')

        steps_per_epoch = math.ceil(len(train_set) / self.cfg.batch_size)
        if self.scheduler is None:
            self.scheduler = self._make_scheduler(steps_per_epoch)

        last_good = copy.deepcopy(self.model.state_dict())

        stop = self.cfg.epochs if until is None else min(until, self.cfg.epochs)
        for epoch in tqdm(range(self.epoch, stop), desc='epochs', disable=self.cfg.epochs < 2):
            try:
                metrics = self.run_epoch(epoch, train_set, val_set)
            except NonFiniteError as e:
                logger.warning(f'Loss component {e.component} went non-finite in epoch {epoch + 1}, aborting')
                raise TrainingDiverged(component=e.component, epoch=epoch + 1, last_good_state=last_good) from e

            self.history.append(metrics)
            self.epoch = epoch + 1
            last_good = copy.deepcopy(self.model.state_dict())

        return self.model, self.history


    def run_epoch(self, epoch, train_set, val_set):
        start = time.perf_counter()
        order = rng_for(self.cfg.seed, 'order', epoch).permutation(len(train_set))
        sums = np.zeros(3)
        batches = 0

        self.model.train()
        for b in range(0, len(order), self.cfg.batch_size):
            tokens, targets = batch_tensors([train_set[i] for i in order[b:b + self.cfg.batch_size]])

            self.optimizer.zero_grad(set_to_none=True)
            total, nll, lcs, lrm = objective(
                model=self.model,
                tokens=tokens,
                targets=targets,
                weights=self.cfg.weights,
                grad_mode=self.cfg.grad_mode,
                base_model=self.base_model,
                cache_init=self.cfg.cache_init
            )
            total.backward()
            self.optimizer.step()
            self.scheduler.step()

            sums += [nll.detach().item(), lcs.detach().item(), lrm.detach().item()]
            batches += 1

        self.model.eval()
        val_nll, transfers, tau = validation_metrics(
            model=self.model,
            sequences=list(val_set)[:self.cfg.val_sequences],
            weights=self.cfg.weights,
            base_model=self.base_model
        )
        l_nll, l_cs, l_rm = (sums / max(batches, 1)).tolist()

        metrics = EpochMetrics(
            epoch=epoch + 1,
            l_nll=l_nll,
            l_cs=l_cs,
            l_rm=l_rm,
            val_nll=val_nll,
            transfers_per_layer=float(np.mean(transfers)),
            transfers_by_layer=[float(v) for v in transfers],
            kendall_tau=tau,
            wall_time_s=time.perf_counter() - start
        )
        logger.info(f'Epoch {metrics.epoch}: l_nll={l_nll:.4f} l_cs={l_cs:.4f} l_rm={l_rm:.4f} '
                    f'val_nll={val_nll:.4f} transfers/layer={metrics.transfers_per_layer:.2f}')
        return metrics


    def state_dict(self):
        return {
            'epoch': self.epoch,
            'optimizer': self.optimizer.state_dict(),
            'scheduler': self.scheduler.state_dict() if self.scheduler else None,
            'history': [asdict(m) for m in self.history],
        }


    def load_state_dict(self, state, steps_per_epoch):
        self.epoch = int(state['epoch'])
        # the scheduler rewrites group lrs on creation, so restore the optimizer after it
        self.scheduler = self._make_scheduler(steps_per_epoch)
        optimizer_state = dict(state['optimizer'])
        optimizer_state['state'] = {int(k): v for k, v in optimizer_state['state'].items()}
        self.optimizer.load_state_dict(optimizer_state)

        if state.get('scheduler'):
            self.scheduler.load_state_dict(state['scheduler'])

        self.history = MetricsHistory.from_rows(state['history'])


def freeze_copy(model):
    base = copy.deepcopy(model)
    for param in base.parameters():
        param.requires_grad_(False)

    base.eval()
    return base


def train(model, dataset, cfg: TrainConfig, val_set=(), base_model=None):
    """Fine-tunes in place. Unless given, the frozen base snapshot for rank
    matching is taken before the first epoch."""
    if base_model is None and cfg.param_policy == 'routing':
        base_model = freeze_copy(model)

    trainer = Trainer(model=model, cfg=cfg, base_model=base_model)
    return trainer.fit(dataset, val_set)
