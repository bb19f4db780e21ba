import logging
import math
import time

from commands.pipeline import CHECKPOINT, base_model, fine_tune_trainer, load_dataset, load_model, save_model
from trainer.train import MetricsHistory
from utils.errors import TrainingDiverged

logger = logging.getLogger('locality.commands')

METRICS_FILE = 'metrics.csv'


def _save_run(cfg, repo, model, trainer):
    save_model(repo, CHECKPOINT, model, extra={'trainer': trainer.state_dict(), 'train': cfg.train.to_dict()})
    repo.write_csv(METRICS_FILE, trainer.history.rows(), MetricsHistory.COLUMNS)


def cmd_train(cfg, repo, resume=False, until=None):
    """Pretrains (or reuses) the base model, fine-tunes it for routing locality and
    writes checkpoint.json and metrics.csv. With resume, continues from checkpoint.json."""
    start = time.perf_counter()
    train_set, val_set = load_dataset(cfg, repo)
    base = base_model(cfg, repo, train_set, val_set)
    model, trainer = fine_tune_trainer(base, cfg.train)

    if resume and repo.find('checkpoint') is not None:
        saved, extra = load_model(repo, CHECKPOINT)
        if 'trainer' in extra:
            model.load_state_dict(saved.state_dict())
            trainer.load_state_dict(extra['trainer'], steps_per_epoch=math.ceil(len(train_set) / cfg.train.batch_size))
            logger.info(f'Resuming fine-tuning after epoch {trainer.epoch}')

    try:
        trainer.fit(train_set, val_set, until=until)
    except TrainingDiverged as e:
        model.load_state_dict(e.last_good_state)
        _save_run(cfg, repo, model, trainer)
        print(f'Training diverged in epoch {e.epoch} ({e.component}); last good checkpoint saved')
        raise

    model.eval()
    _save_run(cfg, repo, model, trainer)

    last = trainer.history[-1] if trainer.history else None
    if last is not None:
        print(f'Trained {trainer.epoch} epochs in {time.perf_counter() - start:.1f}s: '
              f'val_nll={last.val_nll:.4f} transfers/layer={last.transfers_per_layer:.2f} tau={last.kendall_tau:.3f}')

    return model, trainer.history
