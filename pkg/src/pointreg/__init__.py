"""Learned non-rigid point-set registration.

A small numpy-only stack: a reverse-mode autodiff engine, thin-plate-spline
warps, a registration network that predicts warp parameters from a pair of
point sets, synthetic data generation, training, and evaluation.
"""

__version__ = "0.1.0"
