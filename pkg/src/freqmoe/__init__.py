"""Fourier neural operators with frequency-band mixture-of-experts refinement.

Modules:

* ``spectral`` - real 2D FFT helpers, mode truncation and band layouts
* ``nn`` - dense FNO with hand-written reverse mode
* ``moe`` - gated LoRA experts on high-frequency bands, top-K inference
* ``upcycle`` - dense checkpoint to FreqMoE checkpoint
* ``pde`` - heat and 2D vorticity data generators
* ``train`` - Adam, schedule, losses and the two training stages
* ``evalx`` - single-step / rollout errors, gate maps, cost tables
* ``serialization`` - checkpoint and dataset files
* ``cli`` - the ``freqmoe`` command
"""

from .errors import (
    ArchitectureError,
    ConfigurationError,
    DataError,
    FreqMoEError,
    IntegrityError,
    ShapeError,
    TrainingError,
    ValidationError,
    VerificationError,
)
from .moe import FreqMoE, MoeConfig
from .nn import FNO, FnoConfig
from .spectral import BandLayout

__version__ = "0.1.0"

__all__ = [
    "ArchitectureError",
    "BandLayout",
    "ConfigurationError",
    "DataError",
    "FNO",
    "FnoConfig",
    "FreqMoE",
    "FreqMoEError",
    "IntegrityError",
    "MoeConfig",
    "ShapeError",
    "TrainingError",
    "ValidationError",
    "VerificationError",
    "__version__",
]
