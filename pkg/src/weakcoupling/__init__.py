"""Weak-coupling energy exchange in noisy anharmonic oscillator lattices."""

import numba as _numba

# prefer OpenMP; older TBB builds only produce a warning
_numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

__version__ = "0.1.0"
