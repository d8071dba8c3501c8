"""Scene construction helpers and the built-in shoebox rooms."""
from __future__ import annotations

import numpy as np

from .geometry import (DEFAULT_COLOR_TOL, DEFAULT_NORMAL_TOL, SPEED_OF_SOUND, Scene, TriMesh,
                       box_mesh, segment_mesh, shoebox_mesh)
from .raytrace import MaterialSpectrum


def build_scene(mesh: TriMesh, materials=None, segment_materials=None, default="default",
                color_tol=DEFAULT_COLOR_TOL, normal_tol=DEFAULT_NORMAL_TOL,
                speed_of_sound=SPEED_OF_SOUND) -> Scene:
    """Segment ``mesh`` and bind every segment to a material name.

    ``segment_materials`` maps segment id -> material name; unmapped segments
    get ``default``. ``materials`` maps names to MaterialSpectrum (or to seven
    floats, or a single float for a flat spectrum).
    """
    mats = {name: _as_spectrum(v) for name, v in (materials or {}).items()}
    if default not in mats:
        mats[default] = MaterialSpectrum.flat(0.5)
    segs = segment_mesh(mesh, color_tol, normal_tol)
    segment_materials = segment_materials or {}
    segs = [s.with_material(segment_materials.get(s.id, default)) for s in segs]
    return Scene(mesh, tuple(segs), mats, speed_of_sound)


def _as_spectrum(v):
    if isinstance(v, MaterialSpectrum):
        return v
    if np.ndim(v) == 0:
        return MaterialSpectrum.flat(float(v))
    return MaterialSpectrum(tuple(v))


def shoebox_scene(size=(4.0, 5.0, 3.0), reflectance=0.9, subdiv=1,
                  speed_of_sound=SPEED_OF_SOUND) -> Scene:
    """Rectangular room with one segment per wall.

    ``reflectance`` is one value/spectrum for all walls or a list of six, in
    wall order -x, +x, -y, +y, -z (floor), +z (ceiling).
    """
    mesh = shoebox_mesh(size, subdiv=subdiv)
    walls = reflectance if (np.ndim(reflectance) > 0 and len(reflectance) == 6) else [reflectance] * 6
    mats = {f"wall{i}": _as_spectrum(w) for i, w in enumerate(walls)}
    segs = segment_mesh(mesh, DEFAULT_COLOR_TOL, DEFAULT_NORMAL_TOL)
    if len(segs) != 6:
        raise RuntimeError("shoebox segmentation did not produce six walls")
    # map each segment to its wall by the outward axis of its normal
    order = []
    for s in segs:
        n = mesh.face_normals[s.faces[0]]
        ax = int(np.argmax(np.abs(n)))
        order.append(2 * ax + (0 if n[ax] > 0 else 1))  # inward +x normal -> wall -x
    segs = [s.with_material(f"wall{order[i]}") for i, s in enumerate(segs)]
    return Scene(mesh, tuple(segs), mats, speed_of_sound)


def table_mesh(center_xy, size=(1.2, 0.8), height=0.75, color=(0.55, 0.35, 0.2)):
    """A solid table block standing on the floor (outward normals)."""
    cx, cy = center_xy
    w, d = size
    return box_mesh([cx - w / 2, cy - d / 2, 0.0], [cx + w / 2, cy + d / 2, height],
                    inward=False, colors=np.asarray(color, float))
