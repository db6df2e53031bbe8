"""Exception and warning types raised across sisylab."""


class SisylabError(Exception):
    """Base class for all sisylab errors."""


class NumericalBlowup(SisylabError):
    """An atom's momentum exceeded the runaway threshold."""

    def __init__(self, message, atom_index=None, step=None):
        super().__init__(message)
        self.atom_index = atom_index
        self.step = step


class EnsembleFailure(SisylabError):
    """Too many atoms of an ensemble blew up."""

    def __init__(self, message, failed_indices=()):
        super().__init__(message)
        self.failed_indices = tuple(int(i) for i in failed_indices)


class InsufficientData(SisylabError):
    pass


class NonlinearRegime(SisylabError):
    """Mean-square displacement is not linear over the fit window."""


class NoRelaxation(SisylabError):
    pass


class StabilityViolation(SisylabError):
    """Explicit diffusion step exceeds the stability bound."""


class NotConverged(SisylabError):
    """Driven ensemble did not reach a steady state before measuring."""


class NoConvergence(SisylabError):
    """Least-squares solver hit its iteration limit."""


class DegenerateFit(SisylabError):
    """A fitted width ran into the window boundary or is unidentifiable."""


class ConfigError(SisylabError):
    pass


class LinearityWarning(UserWarning):
    """Probe response is not linear in the drive amplitude."""


class ProbeAmplitudeWarning(UserWarning):
    pass
