"""Score-distillation losses with a learned manifold corrective, at desk scale."""

from .errors import LMCError, NumericError, ValidationError

__version__ = "0.1.0"

__all__ = ["LMCError", "NumericError", "ValidationError", "__version__"]
