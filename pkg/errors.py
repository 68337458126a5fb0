"""
Errors Module
Exception hierarchy shared by every stage of the lab, with CLI exit codes
"""


class LabError(Exception):
    """Base class for all lab failures"""
    exit_code = 1


class ConfigError(LabError):
    """Invalid configuration (codec, model, stage, curriculum, mode mismatch)"""
    exit_code = 2


class RejectedStateError(LabError):
    """Operation not allowed in the current state"""
    exit_code = 2


class DataError(LabError):
    """Malformed dataset record"""
    exit_code = 3

    def __init__(self, message, line_number=None, field=None):
        self.line_number = line_number
        self.field = field
        where = []
        if line_number is not None:
            where.append(f"line {line_number}")
        if field is not None:
            where.append(f"field '{field}'")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class RejectedInputError(LabError, ValueError):
    """Operation input outside its contract"""
    exit_code = 3


class TrainingDivergence(LabError):
    """Loss became non-finite; a diagnostic checkpoint was written"""
    exit_code = 4

    def __init__(self, message, checkpoint_path=None):
        self.checkpoint_path = checkpoint_path
        super().__init__(message)


class JudgeFailure(LabError):
    """Judge could not produce a usable verdict"""
    exit_code = 5
