"""Fixed-point SCMs learned with causal-attention transformers.

Modules: ``scm`` (graphs, SCMs, interventions), ``synth`` (random SCMs and
datasets), ``autograd`` (reverse-mode tensors and Adam), ``fip`` (the
fixed-point transformer), ``toinfer`` (amortized ordering inference),
``metrics`` and ``cli``.
"""

from .errors import (
    ArgumentError,
    CapabilityError,
    ConfigError,
    DataError,
    FipError,
    FormatError,
    NumericError,
    OrderingError,
    StructureError,
)

__version__ = "0.1.0"
