"""Acoustic digital-twin toolkit.

Submodules: ``signals`` (chirps, matched filtering, detection), ``handshake``
(two-way ToF protocol), ``geometry`` / ``scenes`` (meshes, BVH, segmentation),
``raytrace`` (specular image-source paths), ``estimate`` (material inversion),
``field`` (surface-emitter field model), ``metrics``, ``twin`` (edits and
localization), ``io`` and ``cli``.
"""
from ._accel import BACKEND
from .geometry import Pose, Scene, TriMesh
from .signals import C1, C2, ChirpSpec, Rir, Waveform

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__", "Pose", "Scene", "TriMesh", "C1", "C2", "ChirpSpec", "Rir",
           "Waveform"]
