"""Hot kernels, dispatched to numba or numpy according to ``AVTWIN_NUMBA``.

Both implementations are importable directly (``kernels.jit`` / ``kernels.np``)
so tests and the benchmark can compare them side by side.
"""
from .._accel import BACKEND, USE_NUMBA
from . import _np as np

if USE_NUMBA:
    from . import _jit as jit
    active = jit
else:
    jit = None
    active = np

first_hit = active.first_hit
image_paths = active.image_paths
accumulate_spectrum = active.accumulate_spectrum
field_render = active.field_render
field_adjoint = active.field_adjoint

__all__ = [
    "BACKEND", "first_hit", "image_paths", "accumulate_spectrum",
    "field_render", "field_adjoint", "jit", "np", "active",
]
