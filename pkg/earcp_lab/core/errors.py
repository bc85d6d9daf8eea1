from typing import List, Optional


class EarcpError(Exception):
    """Base class for all errors raised by earcp_lab"""


class StructuralError(EarcpError):
    """Dimension or expert-count mismatch between inputs"""


class ContractError(EarcpError):
    """A precondition on the values of an input was violated"""


class ConfigurationError(EarcpError, ValueError):
    """Out-of-range or infeasible configuration"""


class FeedbackMatchingError(EarcpError):
    """Feedback arrived for a step with no pending predictions"""


class FeedbackOverflowError(EarcpError):
    """The replay buffer exceeded its configured capacity"""


class ModeError(EarcpError):
    """Operation is not enabled by the session configuration"""


class PersistenceError(EarcpError):
    """Snapshot could not be decoded or has an unsupported schema"""


class IngestionError(EarcpError):
    """Malformed expert-stream CSV input"""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class ConfigParseError(EarcpError):
    """Experiment configuration failed validation"""

    def __init__(self, errors: List[str]):
        self.errors = list(errors)
        super().__init__("invalid experiment configuration:\n  " + "\n  ".join(self.errors))
