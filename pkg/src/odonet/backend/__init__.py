"""Kernel backend selection.

The gather/scatter inner loops of conv2d and the correlation layer come in
two interchangeable implementations: numba-compiled loops (default) and a
pure-numpy fallback. Select with the environment variable

    ODONET_BACKEND=numba   (default when numba imports cleanly)
    ODONET_BACKEND=numpy

``benchmarks/bench_kernels.py`` compares the two.
"""

import os

from ..errors import ConfigError

_choice = os.environ.get("ODONET_BACKEND", "").strip().lower()
if _choice not in ("", "numba", "numpy"):
    raise ConfigError(
        f"ODONET_BACKEND={_choice!r} is not recognized; use 'numba' or 'numpy'"
    )

if _choice == "numpy":
    from . import numpy_kernels as _impl
else:
    try:
        from . import numba_kernels as _impl
    except ImportError:
        if _choice == "numba":
            raise
        from . import numpy_kernels as _impl

NAME = _impl.NAME
im2col = _impl.im2col
col2im_add = _impl.col2im_add
corr_forward = _impl.corr_forward
corr_backward = _impl.corr_backward
