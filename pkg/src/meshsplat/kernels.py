"""Backend selection for the hot kernels.

The compiled extension is used when it imports; otherwise the numpy
fallback. ``MESHSPLAT_PURE_PYTHON=1`` forces the fallback.
"""
import os

from ._kernels import _raster_py

BACKEND = "python"
_impl = _raster_py
if os.environ.get("MESHSPLAT_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from ._kernels import _raster as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:
        _impl = _raster_py

BACKENDS = {"python": _raster_py}
if BACKEND == "cython":
    BACKENDS["cython"] = _impl

rasterize_forward = _impl.rasterize_forward
rasterize_backward = _impl.rasterize_backward
depth_raster = _impl.depth_raster


def get(name: str | None = None):
    """Kernel module by name; ``None`` means the active backend."""
    if name is None:
        return _impl
    try:
        return BACKENDS[name]
    except KeyError:
        raise ValueError(f"kernel backend {name!r} is not available") from None
