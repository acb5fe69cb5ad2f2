"""Kernel backend selection.

At import time the compiled extension is preferred when present; otherwise
the numpy fallback is used. ``SSAL_KERNEL_BACKEND`` overrides the choice
("pure", "compiled" or "auto"). Both backends are bit-identical, so the
selection affects speed only.
"""

import os

from . import pure as _pure

_choice = os.environ.get("SSAL_KERNEL_BACKEND", "auto").lower()

if _choice == "pure":
    _impl = _pure
elif _choice == "compiled":
    from . import _ck as _impl  # raises if the extension was not built
else:
    try:
        from . import _ck as _impl
    except ImportError:
        _impl = _pure

conv_out_hw = _impl.conv_out_hw
im2col = _impl.im2col
col2im = _impl.col2im
maxpool_forward = _impl.maxpool_forward
maxpool_backward = _impl.maxpool_backward


def backend_name():
    """Name of the active kernel backend ("pure" or "compiled")."""
    return _impl.BACKEND
