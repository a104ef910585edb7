"""Deconstruct, learn and reassemble porosity and surface roughness of printed parts."""
import os

__version__ = "0.1.0"

# cap BLAS / OpenMP pools before numpy is first imported
_threads = os.environ.get("POROSYNTH_THREADS")
if _threads and _threads.isdigit() and int(_threads) > 0:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)
