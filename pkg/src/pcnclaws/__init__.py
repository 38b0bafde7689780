"""Differentiable MPM with parameter-conditioned neural constitutive laws.

Subpackage map:

- smallmat    fixed-dimension matrix kernels and their adjoints
- materials   analytic elastic stress models and plastic return mappings
- mpm         MLS-MPM transfers, stepping, and full rollouts
- nn          conditional MLP constitutive laws and parameter normalization
- autodiff    op tape, hand-derived adjoints, BPTT with checkpointing
- training    windowed multi-scenario training (Adam + cosine schedule)
- estimation  inverse parameter estimation through a frozen model
- dataio      dataset generation and binary trajectory/checkpoint formats
- cli         command-line entry point
"""

__version__ = "0.1.0"
