"""Non-autoregressive seq2seq with learnable query tokens and the Q-CTC loss."""

from qctc.errors import InfeasibleAlignmentError, NumericalError, QCTCError, UsageError

__version__ = "0.1.0"

__all__ = [
    "InfeasibleAlignmentError",
    "NumericalError",
    "QCTCError",
    "UsageError",
    "__version__",
]
