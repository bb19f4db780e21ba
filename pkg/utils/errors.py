class LocalityError(Exception):
    pass


class ShapeError(LocalityError, ValueError):
    pass


class ConfigError(LocalityError, ValueError):
    pass


class PolicyError(LocalityError, ValueError):
    pass


class NonFiniteError(LocalityError, ArithmeticError):
    def __init__(self, component, value=None):
        self.component = component
        self.value = value
        super().__init__(f'Non-finite value in {component}: {value}')


class TrainingDiverged(LocalityError):
    def __init__(self, component, epoch, last_good_state=None):
        self.component = component
        self.epoch = epoch
        self.last_good_state = last_good_state
        super().__init__(f'Training diverged at epoch {epoch}, {component} is not finite')
