class EmoeError(Exception):
    """Base class; ``exit_code`` is what the CLI returns for it."""

    exit_code = 1


class ConfigError(EmoeError, ValueError):
    exit_code = 2


class DataError(EmoeError, ValueError):
    exit_code = 3


class NumericError(EmoeError, FloatingPointError):
    exit_code = 4

    def __init__(self, component, value=None):
        self.component = component
        self.value = value
        super().__init__(f"non-finite value in loss component {component!r}: {value}")
