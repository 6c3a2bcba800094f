"""Exception hierarchy shared by every module in the package."""


class PowerformerError(Exception):
    """Base class for all package errors."""


# -- case parsing / grid model ------------------------------------------------


class CaseFormatError(PowerformerError):
    pass


class MissingBlock(CaseFormatError):
    pass


class MalformedRow(CaseFormatError):
    def __init__(self, message, lineno=None):
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)
        self.lineno = lineno


class DanglingReference(CaseFormatError):
    pass


class NoSlackBus(CaseFormatError):
    pass


class SectionConfigError(PowerformerError):
    pass


class UnknownBranch(SectionConfigError):
    pass


class AmbiguousBranch(SectionConfigError):
    pass


class EmptySection(SectionConfigError):
    pass


class InvertedBounds(SectionConfigError):
    pass


# -- power flow ----------------------------------------------------------------


class PowerFlowError(PowerformerError):
    pass


class NonConvergence(PowerFlowError):
    def __init__(self, message, iterations=None, max_mismatch=None):
        super().__init__(message)
        self.iterations = iterations
        self.max_mismatch = max_mismatch


class SingularJacobian(PowerFlowError):
    pass


class SingularSystem(PowerFlowError):
    pass


class NotConverged(PowerFlowError):
    pass


class InvalidCase(PowerFlowError):
    pass


# -- tensors / networks ----------------------------------------------------------


class ShapeMismatch(PowerformerError, ValueError):
    pass


class NonScalarLoss(PowerformerError, ValueError):
    pass


class MissingGrad(PowerformerError):
    pass


class CheckpointError(PowerformerError):
    pass


# -- environment / agent --------------------------------------------------------


class ExhaustedAttempts(PowerformerError):
    pass


class MaskedAction(PowerformerError):
    pass


class AllMasked(PowerformerError):
    pass


class EmptyBatch(PowerformerError, ValueError):
    pass
