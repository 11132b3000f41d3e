"""Selective cross-modality distillation at desk scale.

A hard-sample-selective knowledge-distillation trainer (frozen multi-modal
teacher -> small single-modal student) on synthetic multi-domain data, built
on a minimal reverse-mode tape, plus a brute-force verification suite for the
distribution-shift bounds that motivate the selection rule.
"""

from ._kernels import backend_name

__version__ = "0.1.0"

__all__ = ["backend_name", "__version__"]
