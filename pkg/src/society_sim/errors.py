"""Exception types raised across the simulator."""


class SocietySimError(Exception):
    """Base class for all simulator errors."""


class InvalidConfig(SocietySimError):
    """A scenario value is missing, malformed or out of range."""

    def __init__(self, message: str, path: str | None = None):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class InconsistentTopology(InvalidConfig):
    """An entity references another entity that does not exist."""


class NegativeInput(SocietySimError, ValueError):
    pass


class NonPositiveRate(SocietySimError, ValueError):
    pass


class NonPositiveQuantum(SocietySimError, ValueError):
    pass


class InsufficientCapacity(SocietySimError):
    pass


class NoSocietyOffer(SocietySimError):
    pass


class SeriesTooShort(SocietySimError, ValueError):
    pass


class EmptyInput(SocietySimError, ValueError):
    pass
