class TSFLoraError(Exception):
    """Base exception for all TSFLora errors"""


class ConfigError(TSFLoraError):
    """Raised when a configuration file or section is invalid.

    Carries the dotted key name (``train.eta``) when one can be identified.
    """

    def __init__(self, message: str, key: str = None):
        super().__init__(message)
        self.message = message
        self.key = key


class DimensionError(TSFLoraError, ValueError):
    """Raised when tensor shapes do not line up"""


class NumericError(TSFLoraError, ArithmeticError):
    """Raised when an operation produces NaN or Inf"""


class LabelError(TSFLoraError, ValueError):
    """Raised when a class label falls outside [0, C)"""


class StaleCacheError(TSFLoraError):
    """Raised when a backward pass is given a cache from another model state"""


class CompressionError(TSFLoraError, ValueError):
    """Raised for invalid token budgets, bit-widths or refined sequences"""


class PartitionError(TSFLoraError, ValueError):
    """Raised when a dataset cannot be split across the requested clients"""


class CostModelError(TSFLoraError, ValueError):
    """Raised for nonpositive bandwidth or rates in the latency model"""


class DecodeError(TSFLoraError):
    """Base exception for wire-format decoding errors"""


class TruncatedMessageError(DecodeError):
    """Buffer is shorter than its header announces"""


class BadMagicError(DecodeError):
    """Buffer does not start with the expected magic bytes"""


class UnsupportedVersionError(DecodeError):
    """Buffer carries a wire version this codec does not speak"""


class CodeOverflowError(DecodeError):
    """A quantization level index is not representable in q bits"""


class MalformedMessageError(DecodeError):
    """Header or body fields are inconsistent"""


class BoundError(TSFLoraError, ValueError):
    """Raised for invalid bound constants or an empty measurement input"""
