"""Exception and warning types raised across the package."""


class ScanguardError(ValueError):
    """Base class for data and contract violations."""


class SeriesTooShort(ScanguardError):
    pass


class NonPositivePrice(ScanguardError):
    pass


class NonPositiveRatio(ScanguardError):
    pass


class EmptySample(ScanguardError):
    pass


class EmptyTraining(ScanguardError):
    pass


class InsufficientTukeySamples(ScanguardError):
    """Tukey samples are empty or all fall on one side of their mean."""


class LengthMismatch(ScanguardError):
    pass


class NumericalUnderflow(ScanguardError):
    """Kernel weights summed to zero, so the query is beyond the kernel's reach."""


class NonPositiveBandwidth(ScanguardError):
    pass


class TooFewPoints(ScanguardError):
    pass


class IndexMismatch(ScanguardError):
    pass


class EmptyInput(ScanguardError):
    pass


class MissingColumn(ScanguardError):
    pass


class MalformedRow(ScanguardError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line
        self.message = message


class InsufficientWeeks(ScanguardError):
    pass


class EmptySplit(ScanguardError):
    pass


class OverlappingSplit(ScanguardError):
    pass


class SchemaVersionError(ScanguardError):
    pass


class DegenerateIQRWarning(UserWarning):
    """Quartile spread is zero; limits collapse to a single point."""


class ZeroVarianceWarning(UserWarning):
    pass


class DegenerateVolumesWarning(UserWarning):
    """A volume dimension has no spread; its bandwidth is pinned to a floor."""
