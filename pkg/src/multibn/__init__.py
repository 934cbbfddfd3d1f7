"""Desk-scale adversarial robustness lab.

Implements a multi-branch batch-normalization defense for short video
clips, a detector-driven branch selector, a family of white-box attacks
(dense L-inf, rectangle occlusion, border fill, sparse pixels, and an
adaptive joint-loss variant), seven training objectives, and an
evaluation harness with cross-branch grids, budget sweeps, black-box
transfer, and sanity checks.  Everything runs on numpy; gradients come
from the tape-based reverse-mode engine in :mod:`multibn.autodiff`.
"""

__version__ = "0.1.0"
