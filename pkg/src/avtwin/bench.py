"""Timing of the hot kernels under both backends on fixed workloads.

The numba variant is timed after a warm-up call so compilation is excluded.
"""
from __future__ import annotations

import time

import numpy as np

from . import kernels
from .geometry import RAY_EPS, sphere_directions
from .raytrace import _HIT_TOL, FrequencyGrid, PathTable, band_weights, enumerate_paths, reflectors
from .scenes import shoebox_scene


def workloads(scale: float = 1.0):
    """name -> argument tuple for each kernel, sized by ``scale``."""
    rng = np.random.default_rng(0)
    scene = shoebox_scene((6.0, 5.0, 3.0), 0.8, subdiv=4)
    bvh = scene.mesh.bvh
    k = max(64, int(4096 * scale))
    dirs = sphere_directions(k)
    origins = np.tile([2.0, 1.5, 1.2], (k, 1))
    tx, rx = np.array([1.3, 1.7, 1.4]), np.array([4.1, 3.2, 1.6])
    refl = reflectors(scene)
    order = max(2, int(round(5 * min(scale, 1.0))) + 1)

    paths = enumerate_paths(scene, tx, rx, 6)
    table = PathTable.build(paths, scene.n_segments)
    grid = FrequencyGrid.for_length(14400)
    r_table = np.ascontiguousarray(scene.reflectance() @ band_weights(grid.freqs))
    amps = 1.0 / table.length
    delays = table.length / scene.speed_of_sound

    p, t, n_rays = 256, 14400, max(64, int(512 * scale))
    s = rng.standard_normal((p, t))
    patch = rng.integers(0, p, n_rays)
    shift = rng.integers(0, 600, n_rays)
    alpha = rng.uniform(0, 1, n_rays)
    gain = rng.uniform(0.5, 1.5, n_rays) / n_rays
    inv_tc = 1.0 / ((np.arange(t) + 0.5) / 48_000 * 343.0)
    u = rng.standard_normal(t)
    return {
        "first_hit": (origins, dirs, RAY_EPS, np.full(k, np.inf), *bvh),
        "image_paths": (tx, rx, refl.normal, refl.offset, refl.face_plane, order, RAY_EPS, _HIT_TOL,
                        1 << 16, *bvh),
        "accumulate_spectrum": (amps, delays, np.ascontiguousarray(table.segs), r_table,
                                float(grid.df), grid.n_bins),
        "field_render": (s, patch, shift, alpha, gain, inv_tc),
        "field_adjoint": (u, s, patch, shift, alpha, gain, inv_tc),
    }


def _time(fn, args, repeats):
    best = np.inf
    for _ in range(repeats):
        t = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t)
    return best


def run(repeats: int = 3, scale: float = 1.0) -> list[dict]:
    """Best-of-``repeats`` seconds per kernel and backend."""
    loads = workloads(scale)
    backends = [("numpy", kernels.np)]
    if kernels.jit is not None:
        backends.insert(0, ("numba", kernels.jit))
    rows = []
    for name, args in loads.items():
        for bname, mod in backends:
            fn = getattr(mod, name)
            if bname == "numba":
                fn(*args)  # compile / load cache
            rows.append({"kernel": name, "backend": bname, "seconds": _time(fn, args, repeats)})
    return rows


def format_table(rows) -> str:
    by = {}
    for r in rows:
        by.setdefault(r["kernel"], {})[r["backend"]] = r["seconds"]
    lines = [f"{'kernel':<22}{'numba [ms]':>12}{'numpy [ms]':>12}{'speedup':>9}"]
    for k, v in by.items():
        nb, npy = v.get("numba"), v.get("numpy")
        sp = f"{npy / nb:8.1f}x" if nb and npy else "       -"
        nbs = f"{1e3 * nb:12.2f}" if nb is not None else f"{'-':>12}"
        lines.append(f"{k:<22}{nbs}{1e3 * npy:12.2f}{sp}")
    return "\n".join(lines)
