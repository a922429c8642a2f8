"""Hot slot kernels: compiled Cython core with a numpy fallback.

The compiled module is used when it imports cleanly; set
``CSRFHE_PURE_PYTHON=1`` to force the fallback. ``BACKEND`` names the
active implementation.
"""

import os

from . import _fallback

_compiled = None
if os.environ.get("CSRFHE_PURE_PYTHON") != "1":
    try:
        from . import _slotops as _compiled
    except ImportError:
        _compiled = None

_impl = _compiled if _compiled is not None else _fallback
BACKEND = "cython" if _compiled is not None else "python"

quantize = _impl.quantize
mul_quantize = _impl.mul_quantize
scale_quantize = _impl.scale_quantize
rotate = _impl.rotate
rotate_add = _impl.rotate_add
sgd_epoch = _impl.sgd_epoch


def implementations():
    """Map backend name to kernel module for every backend importable here."""
    out = {"python": _fallback}
    try:
        from . import _slotops
    except ImportError:
        return out
    out["cython"] = _slotops
    return out
