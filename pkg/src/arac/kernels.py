"""Row-kernel backend selection.

The compiled ``arac._kernels`` extension is used when it was built; otherwise
(or when ``ARAC_PURE_PYTHON=1`` is set before import) the numpy reference in
``arac._kernels_py`` is used. ``BACKEND`` names the active choice.
"""
import os

from . import _kernels_py

if os.environ.get("ARAC_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"

softmax_forward = _impl.softmax_forward
softmax_backward = _impl.softmax_backward
layer_norm_forward = _impl.layer_norm_forward
layer_norm_backward = _impl.layer_norm_backward


def available_backends():
    """Return ``{name: module}`` for every backend importable in this process."""
    out = {"python": _kernels_py}
    try:
        from . import _kernels
        out["cython"] = _kernels
    except ImportError:
        pass
    return out
