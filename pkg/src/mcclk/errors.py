"""Exception hierarchy shared by all modules."""


class MCCLKError(Exception):
    """Base class for every error raised by this package."""


class IndexOutOfBounds(MCCLKError, IndexError):
    pass


class DuplicateEdge(MCCLKError, ValueError):
    pass


class NegativeWeight(MCCLKError, ValueError):
    pass


class DimensionMismatch(MCCLKError, ValueError):
    pass


class ParseError(MCCLKError, ValueError):
    def __init__(self, path, line_no, line):
        self.path = str(path)
        self.line_no = line_no
        self.line = line
        super().__init__(f"{self.path}:{line_no}: cannot parse {line!r}")


class EmptyFile(MCCLKError, ValueError):
    pass


class BadRatios(MCCLKError, ValueError):
    pass


class EmptyNeighborhood(MCCLKError, ValueError):
    pass


class BatchTooSmall(MCCLKError, ValueError):
    pass


class NonFiniteLoss(MCCLKError, FloatingPointError):
    pass


class GradCheckFailure(MCCLKError, AssertionError):
    def __init__(self, report):
        self.report = report
        bad = ", ".join(r.name for r in report.blocks if not r.passed)
        super().__init__(f"gradient check failed for: {bad}")


class DegenerateLabels(MCCLKError, ValueError):
    pass


class ConvergenceFailure(MCCLKError, RuntimeError):
    pass


class CheckpointMismatch(MCCLKError, ValueError):
    pass


class DiskWriteError(MCCLKError, OSError):
    pass
