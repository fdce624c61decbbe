"""Backend selection for the hot kernels.

The compiled Cython module is used when it was built; otherwise the numpy
fallback is used. Setting ``FIXQ_PURE_PYTHON=1`` forces the fallback.
"""

import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("FIXQ_PURE_PYTHON", "") != "1":
    try:
        from . import _ckernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:
        pass

lq_quantize = _impl.lq_quantize
nlq_quantize = _impl.nlq_quantize
nlq_encode = _impl.nlq_encode
nlq_decode = _impl.nlq_decode
nearest_codeword = _impl.nearest_codeword
conv_forward = _impl.conv_forward
conv_backward_input = _impl.conv_backward_input
conv_backward_weight = _impl.conv_backward_weight

__all__ = [
    "BACKEND",
    "lq_quantize",
    "nlq_quantize",
    "nlq_encode",
    "nlq_decode",
    "nearest_codeword",
    "conv_forward",
    "conv_backward_input",
    "conv_backward_weight",
]
