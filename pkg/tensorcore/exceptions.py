class PagetrackError(Exception):
    """Base class of every error raised by the pipeline"""


class ConfigurationError(PagetrackError):
    """Shapes, channel counts or settings that cannot work together"""


class ContractViolation(PagetrackError):
    """A caller broke the precondition of an operation"""


class GradientCheckError(PagetrackError):
    def __init__(self, report):
        self.report = report
        super().__init__(report.summary())
