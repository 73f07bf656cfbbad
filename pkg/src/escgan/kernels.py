"""Hot-loop kernels, compiled when available.

The Cython extension ``escgan._kernels`` is imported if it was built; otherwise
the numpy implementations in ``escgan._fallback`` are used. Set
``ESCGAN_PURE_PYTHON=1`` to force the fallback (benchmarks and parity tests
do this explicitly instead).
"""

import os

from escgan import _fallback

if os.environ.get("ESCGAN_PURE_PYTHON") == "1":
    _impl = _fallback
    BACKEND = "python"
else:
    try:
        from escgan import _kernels as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = _fallback
        BACKEND = "python"

hessian_map = _impl.hessian_map
haar_sample = _impl.haar_sample
gini_split_scan = _impl.gini_split_scan

__all__ = ["BACKEND", "hessian_map", "haar_sample", "gini_split_scan"]
