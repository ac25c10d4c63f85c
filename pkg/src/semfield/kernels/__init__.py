"""Hot-kernel dispatch.

Two interchangeable implementations live side by side: numba-jitted loops
(default) and a pure-numpy fallback. ``SEMFIELD_BACKEND=numpy`` selects the
fallback; ``SEMFIELD_BACKEND=numba`` forces the jitted path (import error if
numba is unavailable). ``benchmarks/kernel_bench.py`` compares the two.
"""

import importlib
import logging
import os

_log = logging.getLogger("semfield.kernels")

_KERNEL_NAMES = [
    "pyramid_gather",
    "pyramid_scatter",
    "composite_weights",
    "composite_weights_bwd",
    "adam_update",
    "intersect_scene",
    "raster_blend",
    "raster_blend_bwd",
    "match_within_radius",
]


def get_backend(name):
    """Load one of the kernel modules by name ('numba' or 'numpy')."""
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r}")
    return importlib.import_module(f"{__name__}.{name}_impl")


def _select():
    requested = os.environ.get("SEMFIELD_BACKEND", "auto").lower()
    if requested == "numpy":
        return get_backend("numpy")
    if requested == "numba":
        return get_backend("numba")
    if requested != "auto":
        raise ValueError(f"SEMFIELD_BACKEND must be 'numba', 'numpy', or 'auto', got {requested!r}")
    try:
        return get_backend("numba")
    except ImportError:
        _log.warning("numba unavailable, using pure-numpy kernels")
        return get_backend("numpy")


_impl = _select()
ACTIVE_BACKEND = _impl.BACKEND_NAME

EXP_CLAMP = _impl.EXP_CLAMP
ALPHA_MIN = _impl.ALPHA_MIN
ALPHA_MAX = _impl.ALPHA_MAX
SHAPE_SPHERE = _impl.SHAPE_SPHERE
SHAPE_BOX = _impl.SHAPE_BOX
SHAPE_CAPSULE = _impl.SHAPE_CAPSULE

for _name in _KERNEL_NAMES:
    globals()[_name] = getattr(_impl, _name)

__all__ = _KERNEL_NAMES + [
    "ACTIVE_BACKEND", "get_backend",
    "EXP_CLAMP", "ALPHA_MIN", "ALPHA_MAX",
    "SHAPE_SPHERE", "SHAPE_BOX", "SHAPE_CAPSULE",
]
