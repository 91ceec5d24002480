"""Exception hierarchy shared by all submodules."""


class MhimError(Exception):
    """Base class for every error raised by this package."""


class ShapeMismatch(MhimError, ValueError):
    pass


class NonPositiveTemperature(MhimError, ValueError):
    pass


class NonScalarLoss(MhimError, ValueError):
    pass


class EmptyBag(MhimError, ValueError):
    pass


class LengthMismatch(MhimError, ValueError):
    pass


class LayerOutOfRange(MhimError, IndexError):
    pass


class RatioOutOfRange(MhimError, ValueError):
    pass


class AllMasked(MhimError, ValueError):
    pass


class IncompatibleParameterSets(MhimError, ValueError):
    pass


class IncompatibleCheckpoint(MhimError, ValueError):
    pass


class MalformedHeader(MhimError, ValueError):
    pass


class RowCountMismatch(MhimError, ValueError):
    pass


class NonNumericValue(MhimError, ValueError):
    pass


class TooFewBags(MhimError, ValueError):
    pass


class SingleClass(MhimError, ValueError):
    pass


class EmptyList(MhimError, ValueError):
    pass


class NonFiniteLoss(MhimError, FloatingPointError):
    pass


class ConfigError(MhimError, ValueError):
    """Invalid configuration. ``key`` names the offending entry."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key
