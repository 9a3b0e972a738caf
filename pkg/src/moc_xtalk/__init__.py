"""Compound-fault diagnosis workbench.

Synthetic vibration generation, STFT preprocessing, multi-output
classifier architectures with cross-talk layers and frequency layer
normalization, MKMMD/entropy-minimization domain adaptation, and a
benchmark runner.
"""

__version__ = "0.1.0"
