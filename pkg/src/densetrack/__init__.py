"""Joint dense 3D point tracking and reconstruction from unposed image sequences.

Subpackages cover the full pipeline: analytic scene generation with exact
ground truth, the multi-frame attention model, the multi-task loss stack,
two-phase training, APD/EPE evaluation, and a CLI harness.
"""

__version__ = "0.1.0"
