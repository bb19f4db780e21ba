import math
from dataclasses import dataclass, asdict

import torch

from utils.errors import ConfigError, NonFiniteError


@dataclass(frozen=True)
class LossWeights:
    lambda_cs: float = 0.5
    lambda_rm: float = 0.1
    rho: float = 0.1
    gamma: float = 0.9
    C_sim: int = 4

    def __post_init__(self):
        if self.lambda_cs < 0 or self.lambda_rm < 0:
            raise ConfigError(f'Loss weights must be non-negative, got lambda_cs={self.lambda_cs}, lambda_rm={self.lambda_rm}')

        if not 0 < self.rho < 1:
            raise ConfigError(f'Rank margin rho must lie in (0, 1), got {self.rho}')

        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f'Cache decay gamma must lie in [0, 1], got {self.gamma}')

        if self.C_sim < 1:
            raise ConfigError(f'Simulated cache capacity must be >= 1, got {self.C_sim}')


    def to_dict(self):
        return asdict(self)


# Instruction-tuning and math-reasoning fine-tuning presets
DOLLY_WEIGHTS = LossWeights(lambda_cs=0.5, lambda_rm=0.1)
GSM8K_WEIGHTS = LossWeights(lambda_cs=0.05, lambda_rm=0.01)


def _finite(value):
    if isinstance(value, torch.Tensor):
        return bool(torch.isfinite(value).all())

    return math.isfinite(value)


def total_loss(nll, lcs, lrm, w: LossWeights):
    for name, value in (('l_nll', nll), ('l_cs', lcs), ('l_rm', lrm)):
        if not _finite(value):
            raise NonFiniteError(name, value)

    return nll + w.lambda_cs * lcs + w.lambda_rm * lrm
