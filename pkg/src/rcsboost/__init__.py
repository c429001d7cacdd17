"""Rolling cross-section claims pipeline with boosted trees and TreeSHAP.

Submodules: ``claims``, ``synth``, ``rcs``, ``cohort``, ``features``, ``gbt``,
``evaluate``, ``explain``, ``protocol``, ``config`` and ``cli``.
"""
from ._kernels import available as available_backends, backend_name, use_backend

__version__ = "0.1.0"

__all__ = ["__version__", "available_backends", "backend_name", "use_backend"]
