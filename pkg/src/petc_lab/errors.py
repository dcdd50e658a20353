"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class PetcError(Exception):
    exit_code = 3


class ConfigError(PetcError):
    exit_code = 2


class TraceError(ConfigError):
    pass


class ParseError(ConfigError):
    pass


class DomainError(PetcError):
    """A state left the model's domain guard (e.g. cos(x1) = 0 for the pendulum)."""

    def __init__(self, msg, index=None, time=None):
        super().__init__(msg)
        self.index = index
        self.time = time


class AssumptionViolation(PetcError):
    pass


class ProtocolViolation(PetcError):
    def __init__(self, msg, index=None):
        super().__init__(msg)
        self.index = index


class PreconditionError(PetcError):
    exit_code = 2
