"""Direct feedback alignment (DFA, TDFA, simulated optical DFA) training toolkit."""

import os

# BLAS thread count must be pinned before numpy loads for reproducible reductions.
_threads = os.environ.get("PHOTON_DFA_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
    os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
