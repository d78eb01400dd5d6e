"""Honor the ADREC_THREADS cap before numpy binds its BLAS thread pool.

Imported first from the package __init__ so the env vars are in place
when numpy loads. No effect if ADREC_THREADS is unset or numpy was
already imported by the embedding process.
"""

import os
import sys


def apply_thread_cap() -> None:
    cap = os.environ.get("ADREC_THREADS")
    if not cap or "numpy" in sys.modules:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, cap)


apply_thread_cap()
