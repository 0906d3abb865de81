"""Single-pass forecasting of binary event occurrence maps.

The package bundles a small reverse-mode numpy engine (etide.numerics),
event-stream binning and synthesis (etide.events), the forecaster model
(etide.model), its losses and metrics, a CPU training harness, and a CLI.
"""

from . import numerics
from .numerics import Parameter, Tape, Tensor

__version__ = "0.1.0"

__all__ = ["numerics", "Parameter", "Tape", "Tensor", "__version__"]
