"""Exception types shared across the toolchain."""


class GameshieldError(Exception):
    """Base class for all toolchain errors."""


class ConfigError(GameshieldError):
    """Malformed or inconsistent configuration data."""


class DomainError(GameshieldError):
    """An input lies outside its declared box."""


class OutOfDomainError(GameshieldError):
    """A state lies outside the gridded state box (callers treat as SINK)."""


class RelationInfeasibleError(GameshieldError):
    """No abstract state is related to the given concrete state."""


class InterfaceInfeasibleError(GameshieldError):
    """The refined input leaves the input box by more than the tolerance."""


class HorizonError(GameshieldError):
    """A step index at or beyond the synthesis horizon."""


class SizingError(GameshieldError):
    """A build would exceed its memory or node budget; message carries the sizing report."""
