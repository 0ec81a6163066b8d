"""Exception types shared across the toolkit."""


class DcRefineError(Exception):
    """Base class for toolkit errors."""


class ParameterError(DcRefineError, ValueError):
    """An argument violates an operation's precondition."""


class FormatError(DcRefineError, ValueError):
    """A file on disk does not follow the expected layout."""


class CapacityError(DcRefineError, RuntimeError):
    """A computation would exceed its configured cost cap."""


class StageError(DcRefineError, RuntimeError):
    """A pipeline stage failed; ``stage`` names which one."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
