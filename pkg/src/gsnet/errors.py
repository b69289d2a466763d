class GsnetError(Exception):
    pass


class DimensionError(GsnetError, ValueError):
    """Operand shapes are incompatible."""


class InputError(GsnetError, ValueError):
    """An argument is outside the operation's domain."""


class StateError(GsnetError, RuntimeError):
    pass


class ConfigError(GsnetError, ValueError):
    pass
