"""Parallel-in-time training of piecewise-linear RNNs for dynamical systems reconstruction.

Generalized teacher forcing keeps the forced rollout contracting; the rollout
is then solved with Newton iterations whose linear steps are parallel scans.
"""
__version__ = "0.1.0"
