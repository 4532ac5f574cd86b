"""Exception hierarchy shared by all modules."""


class RegistrationError(Exception):
    """Base class for every error raised by this package."""


class InputError(RegistrationError, ValueError):
    pass


class DegenerateConfiguration(RegistrationError):
    """Matched points do not determine the transformation (singular normal matrix)."""


class DegenerateGeometry(RegistrationError):
    """The stacked reduction matrix lost rank below ``n_phi + 1``."""


class InfeasibleCardinality(RegistrationError, ValueError):
    pass


class OutsideConcavityRegion(RegistrationError):
    """Reconstructed matrix is not positive definite at the evaluation point."""


class OracleTooLarge(RegistrationError):
    pass


class InteriorPointInvalid(RegistrationError):
    pass


class NotExtendable(RegistrationError):
    pass


class IllConditionedSimplex(RegistrationError):
    pass


class NoOpCut(RegistrationError):
    """The new point already lies inside the polytope."""


class DegenerateVertex(RegistrationError):
    pass


class DegenerateFeasibleRegion(RegistrationError):
    pass


class InvalidSpec(RegistrationError, ValueError):
    pass
