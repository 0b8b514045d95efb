"""Exception hierarchy shared by all modules.

The CLI maps the three families below onto exit codes 2, 3 and 4.
"""


class StochHomError(Exception):
    """Base class for every error raised by the package."""


class ConfigInvalid(StochHomError):
    """Invalid input: malformed lattice, region, exponents or config."""


class NumericalFailure(StochHomError):
    """A solver or numerical routine could not produce a result."""


class PropertyViolation(StochHomError):
    """A checked inequality or structural property failed."""


# lattice
class BadOffset(ConfigInvalid):
    pass


class DisconnectedNN(ConfigInvalid):
    pass


class MisalignedRegion(ConfigInvalid):
    pass


class EmptyShrink(ConfigInvalid):
    pass


# energy
class OutOfHalo(ConfigInvalid):
    pass


# potentials
class EnvelopeViolated(PropertyViolation):
    def __init__(self, msg, witness=None):
        super().__init__(msg)
        self.witness = witness


class NotConvex(PropertyViolation):
    def __init__(self, msg, witness=None):
        super().__init__(msg)
        self.witness = witness


# solver
class NoConvergence(NumericalFailure):
    pass


class NullSpace(NumericalFailure):
    pass


class TooLarge(ConfigInvalid):
    pass


# homogenize
class BoundViolated(PropertyViolation):
    pass


class NotQuadratic(ConfigInvalid):
    pass


# gluing
class LayersTooThin(ConfigInvalid):
    pass


class NotScalar(ConfigInvalid):
    pass


# inequalities
class ExponentViolation(ConfigInvalid):
    pass


class NotHypercubic(ConfigInvalid):
    pass


class HypothesisViolation(ConfigInvalid):
    pass


class DivergentMoment(UserWarning):
    """Emitted when a requested moment of the weight law is infinite."""
