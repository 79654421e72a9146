"""
Exception types raised across InsPose
"""


class InsPoseError(Exception):
    """Base class for all InsPose errors"""


class ConfigError(InsPoseError):
    """Invalid configuration value, key, or input size"""


class UndecodableInstanceError(InsPoseError, ValueError):
    """A pose has no labeled keypoint, so no geometry can be derived from it"""


class ParamLengthError(InsPoseError, ValueError):
    """A flat KP-Net parameter vector does not have the expected length"""

    def __init__(self, expected: int, actual: int):
        super().__init__(f"KP-Net parameter vector has length {actual}, expected C_f={expected}")
        self.expected = expected
        self.actual = actual


class ShapeMismatchError(InsPoseError, ValueError):
    """Tensor shapes disagree with what an operation requires"""


class BranchPrunedError(InsPoseError, RuntimeError):
    """A training-only branch was used on an inference-mode model"""


class AnnotationParseError(InsPoseError, ValueError):
    """Malformed COCO-format annotation record"""

    def __init__(self, record_id, reason: str):
        super().__init__(f"annotation record {record_id}: {reason}")
        self.record_id = record_id


class CheckpointMismatchError(InsPoseError):
    """Checkpoint tensors do not fit the model built from the requested config"""


class EvaluationError(InsPoseError, ValueError):
    """Evaluation cannot be carried out (e.g. no ground truth at all)"""


class NonFiniteLossError(InsPoseError, FloatingPointError):
    """Training produced a NaN or infinite loss"""

    def __init__(self, message: str, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path
