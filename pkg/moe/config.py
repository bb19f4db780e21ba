from dataclasses import dataclass, asdict

from utils.errors import ConfigError

PHI_CHOICES = ('silu', 'relu')
ROUTING_MODES = ('hard', 'soft')


@dataclass(frozen=True)
class ModelConfig:
    L: int = 4
    E: int = 16
    K: int = 2
    d: int = 32
    d_ff: int = 64
    V: int = 64
    T_max: int = 128
    phi: str = 'silu'
    routing_mode: str = 'hard'

    def __post_init__(self):
        for name in ('L', 'E', 'K', 'd', 'd_ff', 'V', 'T_max'):
            if getattr(self, name) < 1:
                raise ConfigError(f'model.{name} must be >= 1, got {getattr(self, name)}')

        if self.K > self.E:
            raise ConfigError(f'model.K ({self.K}) cannot exceed model.E ({self.E})')

        if self.phi not in PHI_CHOICES:
            raise ConfigError(f'Unknown gate nonlinearity {self.phi!r}, expected one of {PHI_CHOICES}')

        if self.routing_mode not in ROUTING_MODES:
            raise ConfigError(f'Unknown routing mode {self.routing_mode!r}, expected one of {ROUTING_MODES}')


    def to_dict(self):
        return asdict(self)
