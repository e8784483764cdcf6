"""Backend selection for the stencil kernels.

The compiled extension is used when importable; setting the environment
variable ``SANDQVI_PURE_PYTHON=1`` forces the NumPy fallback.
"""
import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if not os.environ.get("SANDQVI_PURE_PYTHON"):
    try:
        from . import _ckernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:
        pass

gradient = _impl.gradient
gradient_adjoint = _impl.gradient_adjoint
penalty = _impl.penalty


def backends():
    """Return the importable backends as a ``{name: module}`` dict."""
    found = {"python": _pykernels}
    try:
        from . import _ckernels
        found["cython"] = _ckernels
    except ImportError:
        pass
    return found
