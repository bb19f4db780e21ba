import logging
from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from moe.layers import DTYPE
from predictor.plan import plan_from_scores
from utils.errors import ConfigError, TrainingDiverged
from utils.seeds import rng_for, torch_generator

logger = logging.getLogger('locality.predictor')


@dataclass(frozen=True)
class PredictorConfig:
    d_emb: int = 64
    hidden: int = 128
    learning_rate: float = 0.05
    momentum: float = 0.9
    epochs: int = 100
    batch_size: int = 16
    damping: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.hidden < 1 or self.d_emb < 1:
            raise ConfigError('predictor.hidden and predictor.d_emb must be >= 1')

        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError('predictor.batch_size must be >= 1 and predictor.epochs >= 0')


    def to_dict(self):
        return asdict(self)


# Full-size settings: 768-dim sentence embeddings into a 1024-wide MLP
FULL_SCALE_PREDICTOR = PredictorConfig(d_emb=768, hidden=1024, learning_rate=2e-4, epochs=10)


class PredictorMLP(nn.Module):
    def __init__(self, d_emb, hidden, L, E, generator=None):
        super().__init__()
        self.L = L
        self.E = E
        self.fc1 = nn.Linear(d_emb, hidden, dtype=DTYPE)
        self.fc2 = nn.Linear(hidden, L * E, dtype=DTYPE)

        if generator is not None:
            with torch.no_grad():
                for fc in (self.fc1, self.fc2):
                    bound = 1.0 / fc.in_features ** 0.5
                    fc.weight.uniform_(-bound, bound, generator=generator)
                    fc.bias.uniform_(-bound, bound, generator=generator)

        self.loss_history = []


    def forward(self, emb):
        emb = torch.as_tensor(emb, dtype=DTYPE)
        return self.fc2(F.relu(self.fc1(emb))).reshape(*emb.shape[:-1], self.L, self.E)


    def predict(self, emb):
        """Row-softmaxed preference scores, (L, E) per embedding."""
        with torch.no_grad():
            return torch.softmax(self(emb), dim=-1).numpy()


def kl_to_prediction(logits, targets):
    """Mean over rows of KL(target || softmax(logits))."""
    log_q = F.log_softmax(logits, dim=-1)
    rows = targets.numel() // targets.shape[-1]
    return F.kl_div(log_q, targets, reduction='sum') / rows


def train_predictor(dataset, hparams: PredictorConfig, L=None, E=None) -> PredictorMLP:
    if not dataset:
        raise ConfigError('Predictor dataset is empty')

    L, E = dataset[0].target.shape if L is None else (L, E)
    mlp = PredictorMLP(
        d_emb=hparams.d_emb,
        hidden=hparams.hidden,
        L=L,
        E=E,
        generator=torch_generator(hparams.seed, 'predictor')
    )
    X = torch.as_tensor(np.stack([ex.embedding for ex in dataset]), dtype=DTYPE)
    Y = torch.as_tensor(np.stack([ex.target for ex in dataset]), dtype=DTYPE)
    optimizer = torch.optim.SGD(mlp.parameters(), lr=hparams.learning_rate, momentum=hparams.momentum)

    for epoch in range(hparams.epochs):
        order = rng_for(hparams.seed, 'predictor', epoch).permutation(len(dataset))
        total = 0.0

        for b in range(0, len(order), hparams.batch_size):
            idx = torch.as_tensor(order[b:b + hparams.batch_size])
            optimizer.zero_grad(set_to_none=True)
            loss = kl_to_prediction(mlp(X[idx]), Y[idx])

            if not torch.isfinite(loss):
                raise TrainingDiverged(component='predictor_kl', epoch=epoch + 1)

            loss.backward()
            optimizer.step()
            total += loss.detach().item() * len(idx)

        mlp.loss_history.append(total / len(dataset))

    if mlp.loss_history:
        logger.info(f'Predictor trained for {hparams.epochs} epochs, final KL {mlp.loss_history[-1]:.5f}')

    return mlp


def dataset_kl(mlp, dataset):
    X = torch.as_tensor(np.stack([ex.embedding for ex in dataset]), dtype=DTYPE)
    Y = torch.as_tensor(np.stack([ex.target for ex in dataset]), dtype=DTYPE)

    with torch.no_grad():
        return float(kl_to_prediction(mlp(X), Y))


def predict_prefetch(mlp, emb, C):
    return plan_from_scores(mlp.predict(emb), C)
