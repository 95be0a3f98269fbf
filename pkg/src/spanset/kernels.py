"""Backend selection for the hot kernels.

The compiled extension is used when it imports cleanly; setting
``SPANSET_PURE_PYTHON=1`` forces the Python fallback.
"""
from __future__ import annotations

import os

from . import _kernels_py

if os.environ.get("SPANSET_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
else:
    try:
        from . import _ckernels as _impl  # type: ignore[attr-defined]
    except ImportError:
        _impl = _kernels_py

BACKEND: str = _impl.BACKEND
hungarian_lexmin = _impl.hungarian_lexmin
match_costs = _impl.match_costs
layer_norm_fwd = _impl.layer_norm_fwd
layer_norm_bwd = _impl.layer_norm_bwd
softmax_fwd = _impl.softmax_fwd
softmax_bwd = _impl.softmax_bwd
adamw_update = _impl.adamw_update
dropout_fwd = _impl.dropout_fwd
dropout_bwd = _impl.dropout_bwd

__all__ = [
    "BACKEND",
    "adamw_update",
    "dropout_bwd",
    "dropout_fwd",
    "hungarian_lexmin",
    "layer_norm_bwd",
    "layer_norm_fwd",
    "match_costs",
    "softmax_bwd",
    "softmax_fwd",
]
