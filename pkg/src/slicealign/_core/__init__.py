"""Hot sampling and histogram loops.

The compiled module is used when it was built and importable; otherwise the
numpy fallback is used. Set ``SLICEALIGN_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if not os.environ.get("SLICEALIGN_PURE_PYTHON"):
    try:
        from . import _ckernels as _impl  # noqa: F811
    except ImportError:
        _impl = _pykernels
    else:
        BACKEND = "cython"

sample_bilinear = _impl.sample_bilinear
affine_sample = _impl.affine_sample
joint_histogram = _impl.joint_histogram
mi_gradient = _impl.mi_gradient
sample_field = _impl.sample_field
square_field = _impl.square_field
warp_field_affine = _impl.warp_field_affine

__all__ = [
    "BACKEND",
    "sample_bilinear",
    "affine_sample",
    "joint_histogram",
    "mi_gradient",
    "sample_field",
    "square_field",
    "warp_field_affine",
]
