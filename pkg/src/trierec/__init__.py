"""Generative sequential recommendation over semantic-ID tries.

Set ``TRIEREC_NUM_THREADS`` before import to cap numba and BLAS threads, and
``TRIEREC_DISABLE_NUMBA=1`` to force the pure-numpy kernels.
"""

import os as _os

_threads = _os.environ.get("TRIEREC_NUM_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMBA_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from ._kernels import BACKEND, HAVE_NUMBA  # noqa: E402

__version__ = "0.1.0"
__all__ = ["BACKEND", "HAVE_NUMBA", "__version__"]
