"""Exception and warning types shared across the package."""


class IVMatchError(Exception):
    """Base class for every error raised by ivmatch."""


class NumericalError(IVMatchError):
    """A numerical routine could not produce a valid answer."""


class RankDeficient(NumericalError):
    def __init__(self, columns):
        self.columns = list(columns)
        super().__init__(f"design matrix is rank deficient; dependent columns: {self.columns}")


class SingularSubmatrix(NumericalError):
    pass


class EmptyGroup(IVMatchError):
    pass


class StatisticFailed(NumericalError):
    def __init__(self, n_failed, n_total, first_error=None):
        self.n_failed = n_failed
        self.n_total = n_total
        self.first_error = first_error
        msg = f"{n_failed} of {n_total} bootstrap replicates failed"
        if first_error is not None:
            msg += f" (first failure: {first_error!r})"
        super().__init__(msg)


class DataError(IVMatchError):
    """Input data does not satisfy a column or schema contract."""


class MissingColumn(DataError):
    def __init__(self, columns):
        self.columns = [columns] if isinstance(columns, str) else list(columns)
        super().__init__(f"missing column(s): {self.columns}")


class NonBinary(DataError):
    pass


class UnknownLevel(DataError):
    pass


class LevelExplosion(DataError):
    pass


class DegenerateInstrument(NumericalError):
    pass


class SubsampleTooSmall(NumericalError):
    pass


class NoConvergence(NumericalError):
    def __init__(self, iterations, residual):
        self.iterations = iterations
        self.residual = residual
        super().__init__(f"no convergence after {iterations} iterations (max |moment| = {residual:.3g})")


class PerfectSeparation(NumericalError):
    pass


class LeadUnavailable(NumericalError):
    def __init__(self, lead):
        self.lead = lead
        super().__init__(f"no matched set has outcome data at relative period {lead}")


class CalibrationFailed(NumericalError):
    pass


class UnknownInstrument(IVMatchError):
    pass


class ConfigError(IVMatchError):
    pass


class ComplianceWarning(UserWarning):
    """Complier shares fell outside [0, 1], which signals defiers."""
