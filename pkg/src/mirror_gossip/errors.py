"""Exception hierarchy shared by all modules."""


class MirrorGossipError(Exception):
    """Base class for every error raised by this package."""


class MirrorRangeError(MirrorGossipError, OverflowError):
    """A value left the representable double-precision range."""


class ConfigurationError(MirrorGossipError, ValueError):
    """Parameters cannot produce a valid run or bound."""


class ShapeError(MirrorGossipError, ValueError):
    """Model or data dimensions do not agree."""


class ProtocolError(MirrorGossipError, ValueError):
    """Mixing weights violate the gossip contract."""


class DomainError(MirrorGossipError, ValueError):
    """Inputs lie outside the regime an inequality is stated for."""


class ConvergenceError(MirrorGossipError, RuntimeError):
    """An iterative solver hit its iteration cap."""


class IntegrityError(MirrorGossipError):
    """A saved trace failed its checksum or structural validation."""
