"""Compositional motion toolkit.

Two-phase low-rank motion customization on a toy flow-matching video
denoiser, a divide-and-merge compositional sampler, and a crop-and-compare
metric for multi-motion fidelity.  Everything runs on CPU with numpy and is
bit-deterministic for a fixed seed.
"""

from .errors import ConfigError, ContractViolation

__all__ = ["ConfigError", "ContractViolation"]

__version__ = "0.1.0"
