"""Exception hierarchy shared across the package."""


class TopoTraceError(Exception):
    """Base class for all package errors."""


class ValidationError(TopoTraceError):
    """Input failed a documented precondition."""


# trace grammar


class TraceSyntaxError(ValidationError):
    def __init__(self, line_no: int, line: str, reason: str = "non-conforming line"):
        self.line_no = line_no
        self.line = line
        super().__init__(f"line {line_no}: {reason}: {line!r}")


class DuplicateNodeId(ValidationError):
    pass


class UnknownParentId(ValidationError):
    pass


class UnknownLinkEndpoint(ValidationError):
    pass


class InvariantViolation(ValidationError):
    pass


class EmptyTrace(ValidationError):
    pass


# labeling


class MalformedGroundTruth(ValidationError):
    pass


class QuestionMismatch(ValidationError):
    pass


class EmptyResponseSet(ValidationError):
    pass


class EmptyInput(ValidationError):
    pass


class MissingTopologyScore(ValidationError):
    pass


# analytics / pairs / simpo


class EmptyCorpus(ValidationError):
    pass


class LeakageError(TopoTraceError):
    """Topology-instruction text found where it must have been stripped."""


class TokenOutOfRange(ValidationError):
    pass


class EmptyDataset(ValidationError):
    pass


# generation


class TemplateError(ValidationError):
    pass


class MissingTemplate(TemplateError):
    pass


class EndpointError(TopoTraceError):
    def __init__(self, status: int | None, message: str = ""):
        self.status = status
        super().__init__(f"endpoint error (status={status}): {message}".rstrip(": "))


class AuthMissing(TopoTraceError):
    pass


class ConfigError(ValidationError):
    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(f"{where}{message}")
