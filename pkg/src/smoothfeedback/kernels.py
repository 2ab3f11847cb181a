"""Backend selection for the hot loops.

The compiled extension is used when it imports; otherwise the numpy
fallback takes over. Set ``SMOOTHFEEDBACK_BACKEND=python`` to force the
fallback.
"""

import logging
import os

from . import _fallback

logger = logging.getLogger(__name__)

_NAMES = (
    "grid_minplus",
    "grid_convolve",
    "interp_linear",
    "interp_cubic",
    "transcription_cost",
    "pmp_shoot",
)


def _load():
    if os.environ.get("SMOOTHFEEDBACK_BACKEND", "").lower() == "python":
        return _fallback, "python"
    try:
        from . import _kernels  # type: ignore[attr-defined]
    except ImportError as exc:
        logger.info("compiled kernels unavailable (%s); using numpy fallback", exc)
        return _fallback, "python"
    return _kernels, "cython"


_impl, BACKEND = _load()

grid_minplus = _impl.grid_minplus
grid_convolve = _impl.grid_convolve
interp_linear = _impl.interp_linear
interp_cubic = _impl.interp_cubic
transcription_cost = _impl.transcription_cost
pmp_shoot = _impl.pmp_shoot


def backend_module(name: str):
    """Return the kernel module for ``name`` ("cython" or "python")."""
    if name == "python":
        return _fallback
    from . import _kernels  # type: ignore[attr-defined]

    return _kernels
