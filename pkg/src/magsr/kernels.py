"""Backend selection for the hot kernels.

The compiled extension is used when it imports; otherwise the numpy
fallback. Set ``MAGSR_PURE_PYTHON=1`` to force the fallback.
"""
import os

BACKEND = "python"

if os.environ.get("MAGSR_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from ._ckernels import crc16_ccitt, dipole_field  # noqa: F401

        BACKEND = "cython"
    except ImportError:
        pass

if BACKEND == "python":
    from ._kernels_py import crc16_ccitt, dipole_field  # noqa: F401

__all__ = ["BACKEND", "crc16_ccitt", "dipole_field"]
