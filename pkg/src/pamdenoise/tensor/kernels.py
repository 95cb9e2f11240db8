"""Backend selection for the hot loops (im2col/col2im and 2x2 max pooling).

The compiled extension is used when it imports; otherwise the numpy
fallback is used. Set ``PAMDENOISE_KERNELS=python`` to force the fallback.
"""

import logging
import os

from . import _pykernels

log = logging.getLogger(__name__)

BACKEND = "python"
_impl = _pykernels

if os.environ.get("PAMDENOISE_KERNELS", "").lower() != "python":
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on build
        log.debug("compiled kernels unavailable, using numpy fallback")

im2col = _impl.im2col
col2im = _impl.col2im
maxpool2_forward = _impl.maxpool2_forward
maxpool2_backward = _impl.maxpool2_backward

__all__ = ["BACKEND", "im2col", "col2im", "maxpool2_forward", "maxpool2_backward"]
