"""Focal-sweep multispectral imaging through a chromatic Fresnel lens.

Setting ``SPECTRASWEEP_THREADS`` caps the BLAS/OpenMP thread pools; it only takes
effect when this package is imported before numpy.
"""

import os as _os

__version__ = "0.1.0"

_threads = _os.environ.get("SPECTRASWEEP_THREADS", "").strip()
if _threads.isdigit() and int(_threads) > 0:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)
