"""Backend switch for the hot loops.

Set ``AVTWIN_NUMBA=0`` in the environment before import to run every kernel
through its vectorised numpy twin instead of the numba-compiled one. The
numpy path is also used automatically when numba cannot be imported.
"""
import os

_flag = os.environ.get("AVTWIN_NUMBA", "1").strip().lower()
USE_NUMBA = _flag not in ("0", "false", "no", "off")

if USE_NUMBA:
    try:
        import numba  # noqa: F401
    except ImportError:  # pragma: no cover
        USE_NUMBA = False

BACKEND = "numba" if USE_NUMBA else "numpy"

