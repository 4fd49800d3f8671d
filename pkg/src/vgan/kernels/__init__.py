"""Convolution kernel backends.

Two interchangeable implementations of the 3D convolution primitives live
here: a compiled Cython extension (built by setup.py) and a pure-NumPy
fallback. The compiled one is preferred when importable; set
``VGAN_KERNELS=fallback`` or ``VGAN_KERNELS=compiled`` to force a choice.
``BACKEND`` records which one is active. ``benchmarks/bench_kernels.py``
compares the two.
"""

import os

from vgan.kernels import reference

_choice = os.environ.get("VGAN_KERNELS", "")

if _choice == "fallback":
    _impl = reference
    BACKEND = "fallback"
else:
    try:
        from vgan.kernels import _convcore as _impl

        BACKEND = "compiled"
    except ImportError:
        if _choice == "compiled":
            raise
        _impl = reference
        BACKEND = "fallback"

conv_out_extents = _impl.conv_out_extents
conv3d_forward = _impl.conv3d_forward
conv3d_grad_input = _impl.conv3d_grad_input
conv3d_grad_weight = _impl.conv3d_grad_weight
