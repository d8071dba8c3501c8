"""Specular acoustic ray tracing and frequency-domain RIR synthesis.

Paths come from image sources mirrored across per-segment planes; every leg
of a candidate is re-checked with a ray cast, which rejects occluded paths and
reflection points that fall outside the reflecting faces. A path's response
is ``G_tx * G_rx / d * exp(-2j*pi*f*d/c) * prod_s R_s(f)``.
"""
from __future__ import annotations

import weakref
from dataclasses import dataclass, field

import numpy as np
from scipy.special import sph_harm_y

from . import kernels
from .geometry import RAY_EPS, GeometryError, Pose, Scene, point_mesh_distance
from .signals import RIR_LENGTH, SAMPLE_RATE, Rir

BAND_CENTERS = np.array([125.0, 250.0, 500.0, 1000.0, 2000.0, 4000.0, 8000.0])
N_BANDS = len(BAND_CENTERS)
PLANARITY_TOL = 0.02  # metres
MAX_BOUNCES = 8
SH_DEGREE = 2
_HIT_TOL = 1e-6
_SURFACE_CLEARANCE = 1e-3


@dataclass(frozen=True)
class MaterialSpectrum:
    """Reflection amplitude ratio at the seven octave band centres."""

    bands: tuple

    def __post_init__(self):
        b = np.asarray(self.bands, dtype=float).reshape(-1)
        if b.shape != (N_BANDS,):
            raise ValueError(f"need {N_BANDS} band values, got {b.shape}")
        if np.any(b < 0) or np.any(b > 1):
            raise ValueError("reflection amplitudes must lie in [0, 1]")
        object.__setattr__(self, "bands", tuple(float(x) for x in b))

    @classmethod
    def flat(cls, r: float) -> "MaterialSpectrum":
        return cls((r,) * N_BANDS)

    def response(self, freqs) -> np.ndarray:
        return np.asarray(self.bands) @ band_weights(freqs)


def band_weights(freqs) -> np.ndarray:
    """(7, B) hat-function weights: linear in log-frequency, clamped at both ends."""
    f = np.asarray(freqs, dtype=float)
    x = np.log2(np.clip(f, BAND_CENTERS[0], BAND_CENTERS[-1]))
    xc = np.log2(BAND_CENTERS)
    w = np.zeros((N_BANDS, f.size))
    pos = np.clip(np.searchsorted(xc, x, side="right") - 1, 0, N_BANDS - 2)
    frac = (x - xc[pos]) / (xc[pos + 1] - xc[pos])
    cols = np.arange(f.size)
    w[pos, cols] = 1.0 - frac
    w[pos + 1, cols] += frac
    return w


def real_sh(dirs, degree: int = SH_DEGREE) -> np.ndarray:
    """Real orthonormal spherical harmonics, shape (N, (degree+1)^2), index l*l+l+m."""
    d = np.atleast_2d(np.asarray(dirs, float))
    d = d / np.linalg.norm(d, axis=1, keepdims=True)
    theta = np.arccos(np.clip(d[:, 2], -1.0, 1.0))
    phi = np.arctan2(d[:, 1], d[:, 0])
    out = np.empty((len(d), (degree + 1) ** 2))
    for l in range(degree + 1):
        for m in range(-l, l + 1):
            y = sph_harm_y(l, abs(m), theta, phi)
            if m < 0:
                v = np.sqrt(2) * (-1) ** m * y.imag
            elif m == 0:
                v = y.real
            else:
                v = np.sqrt(2) * (-1) ** m * y.real
            out[:, l * l + l + m] = v
    return out


def softplus(x):
    return np.logaddexp(0.0, x)


_Y00 = 0.5 / np.sqrt(np.pi)
ISO_C00 = float(np.log(np.e - 1.0) / _Y00)  # softplus(c00 * Y00) == 1


@dataclass(frozen=True)
class GainPattern:
    """Device gain ``scale * softplus(sum_lm c_lm Y_lm(dir_local))``; always positive."""

    coeffs: np.ndarray = field(default_factory=lambda: isotropic_coeffs())
    scale: float = 1.0

    def __post_init__(self):
        c = np.asarray(self.coeffs, float).reshape(-1)
        deg = int(round(np.sqrt(len(c)))) - 1
        if (deg + 1) ** 2 != len(c):
            raise ValueError("coefficient count must be a perfect square")
        object.__setattr__(self, "coeffs", c)

    @property
    def degree(self) -> int:
        return int(round(np.sqrt(len(self.coeffs)))) - 1

    @classmethod
    def isotropic(cls, degree: int = SH_DEGREE) -> "GainPattern":
        return cls(isotropic_coeffs(degree))

    def __call__(self, dirs_local) -> np.ndarray:
        return self.scale * softplus(real_sh(dirs_local, self.degree) @ self.coeffs)


def isotropic_coeffs(degree: int = SH_DEGREE) -> np.ndarray:
    c = np.zeros((degree + 1) ** 2)
    c[0] = ISO_C00
    return c


@dataclass(frozen=True, eq=False)
class SpecularPath:
    points: np.ndarray  # (K+2, 3): tx, reflection points, rx
    segments: tuple  # segment id per bounce

    @property
    def n_bounces(self) -> int:
        return len(self.segments)

    @property
    def legs(self) -> np.ndarray:
        return np.linalg.norm(np.diff(self.points, axis=0), axis=1)

    @property
    def length(self) -> float:
        return float(self.legs.sum())

    @property
    def departure(self) -> np.ndarray:
        v = self.points[1] - self.points[0]
        return v / np.linalg.norm(v)

    @property
    def arrival(self) -> np.ndarray:
        """Propagation direction of the last leg, from the last bounce into Rx."""
        v = self.points[-1] - self.points[-2]
        return v / np.linalg.norm(v)

    def to_dict(self):
        return {"points": self.points.tolist(), "segments": list(self.segments),
                "length": self.length}


@dataclass(frozen=True)
class FrequencyGrid:
    n_fft: int
    sample_rate: float = SAMPLE_RATE

    def __post_init__(self):
        n = int(self.n_fft)
        if n < 1 or n & (n - 1):
            raise ValueError("FFT size must be a power of two")

    @classmethod
    def for_length(cls, n_taps: int, sample_rate: float = SAMPLE_RATE) -> "FrequencyGrid":
        return cls(1 << max(0, int(np.ceil(np.log2(max(n_taps, 1))))), sample_rate)

    @property
    def freqs(self) -> np.ndarray:
        return np.fft.rfftfreq(self.n_fft, 1.0 / self.sample_rate)

    @property
    def df(self) -> float:
        return self.sample_rate / self.n_fft

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1


# ---------------------------------------------------------------- planes

@dataclass(frozen=True)
class Reflectors:
    normal: np.ndarray  # (P, 3), pointing to the side sound arrives from
    offset: np.ndarray  # (P,), plane is {x : n.x = offset}
    segment: np.ndarray  # (P,) segment id of each plane
    face_plane: np.ndarray  # (F,) plane index of each face


def _fit_plane(mesh, faces):
    verts = mesh.vertices[np.unique(mesh.faces[faces])]
    c = verts.mean(axis=0)
    _, _, vt = np.linalg.svd(verts - c)
    n = vt[-1]
    mean_n = (mesh.face_normals[faces] * mesh.areas[faces, None]).sum(axis=0)
    if n @ mean_n < 0:
        n = -n
    dev = np.abs((verts - c) @ n).max()
    return n, float(n @ c), dev, vt


def _planar_groups(mesh, faces, tol):
    n, d, dev, vt = _fit_plane(mesh, faces)
    if dev <= tol or len(faces) == 1:
        return [(faces, n, d)]
    normals = mesh.face_normals[faces]
    mean_n = normals.mean(axis=0)
    a = normals[int(np.argmin(normals @ mean_n))]
    b = normals[int(np.argmax(normals @ -a))]
    lab = (normals @ a) < (normals @ b)
    for _ in range(8):
        if lab.all() or not lab.any():
            break
        ca = normals[~lab].mean(axis=0)
        cb = normals[lab].mean(axis=0)
        new = (normals @ ca) < (normals @ cb)
        if np.array_equal(new, lab):
            break
        lab = new
    if lab.all() or not lab.any():
        # smooth but curved: split spatially along the principal axis
        proj = mesh.centroids[faces] @ vt[0]
        lab = proj > np.median(proj)
        if lab.all() or not lab.any():
            lab = np.arange(len(faces)) >= len(faces) // 2
    return _planar_groups(mesh, faces[~lab], tol) + _planar_groups(mesh, faces[lab], tol)


_REFLECTOR_CACHE: "weakref.WeakKeyDictionary[Scene, Reflectors]" = weakref.WeakKeyDictionary()


def reflectors(scene: Scene, tol: float = PLANARITY_TOL) -> Reflectors:
    """Best-fit planes per segment, splitting segments that are not planar within ``tol``."""
    cached = _REFLECTOR_CACHE.get(scene)
    if cached is not None:
        return cached
    nf = scene.mesh.n_faces if scene.mesh is not None else 0
    normals, offsets, segs = [], [], []
    face_plane = np.full(nf, -1, dtype=np.int64)
    for s in scene.segments:
        for faces, n, d in _planar_groups(scene.mesh, np.asarray(s.faces), tol):
            face_plane[faces] = len(normals)
            normals.append(n)
            offsets.append(d)
            segs.append(s.id)
    r = Reflectors(np.array(normals).reshape(-1, 3), np.array(offsets, dtype=float),
                   np.array(segs, dtype=np.int64), face_plane)
    _REFLECTOR_CACHE[scene] = r
    return r


# ---------------------------------------------------------------- paths

def _check_point(scene: Scene, p, name):
    if scene.mesh is None or scene.mesh.n_faces == 0:
        return
    if not scene.contains(p):
        raise GeometryError(f"{name} {p} lies outside the scene bounds")
    if point_mesh_distance(scene.mesh, p) < _SURFACE_CLEARANCE:
        raise GeometryError(f"{name} {p} lies on a surface")


def enumerate_paths(scene: Scene, p_tx, p_rx, max_bounces: int = MAX_BOUNCES) -> list[SpecularPath]:
    """Valid specular paths up to ``max_bounces``, ordered by (bounces, plane sequence)."""
    p_tx = np.asarray(p_tx, float)
    p_rx = np.asarray(p_rx, float)
    _check_point(scene, p_tx, "tx")
    _check_point(scene, p_rx, "rx")
    if np.linalg.norm(p_tx - p_rx) == 0:
        raise GeometryError("tx and rx coincide")
    if scene.mesh is None or scene.mesh.n_faces == 0:
        return [SpecularPath(np.stack([p_tx, p_rx]), ())]
    refl = reflectors(scene)
    bvh = scene.mesh.bvh
    capacity = 4096
    while True:
        n, overflow, seqs, nb, pts = kernels.image_paths(
            p_tx, p_rx, refl.normal, refl.offset, refl.face_plane, int(max_bounces),
            RAY_EPS, _HIT_TOL, capacity, *bvh)
        if not overflow:
            break
        capacity *= 4
    rows = []
    for i in range(n):
        k = int(nb[i])
        planes = tuple(int(x) for x in seqs[i, :k])
        rows.append(((k, planes), pts[i, :k + 2].copy()))
    rows.sort(key=lambda r: r[0])
    return [SpecularPath(p, tuple(int(refl.segment[q]) for q in key[1])) for key, p in rows]


@dataclass(frozen=True, eq=False)
class PathTable:
    """Array view of a path list used by the renderers."""

    length: np.ndarray  # (P,)
    segs: np.ndarray  # (P, Kmax) segment ids, -1 padded
    counts: np.ndarray  # (P, S) bounce multiplicity per segment
    departure: np.ndarray  # (P, 3)
    arrival: np.ndarray  # (P, 3)

    @classmethod
    def build(cls, paths: list[SpecularPath], n_segments: int) -> "PathTable":
        p = len(paths)
        kmax = max([q.n_bounces for q in paths], default=0)
        segs = -np.ones((p, max(kmax, 1)), dtype=np.int64)
        counts = np.zeros((p, n_segments))
        for i, q in enumerate(paths):
            for j, s in enumerate(q.segments):
                segs[i, j] = s
                counts[i, s] += 1
        dep = np.array([q.departure for q in paths]).reshape(-1, 3)
        arr = np.array([q.arrival for q in paths]).reshape(-1, 3)
        return cls(np.array([q.length for q in paths], dtype=float), segs, counts, dep, arr)

    def __len__(self):
        return len(self.length)


def _gains_and_reflectance(scene, params):
    if params is None:
        return GainPattern.isotropic(), GainPattern.isotropic(), scene.reflectance()
    g_tx, g_rx = params.gains()
    return g_tx, g_rx, params.reflectance()


def path_gains(table: PathTable, g_tx: GainPattern, g_rx: GainPattern,
               pose_tx: Pose | None = None, pose_rx: Pose | None = None) -> np.ndarray:
    dep = table.departure if pose_tx is None else pose_tx.to_local(table.departure)
    arr = table.arrival if pose_rx is None else pose_rx.to_local(table.arrival)
    if len(table) == 0:
        return np.zeros(0)
    return g_tx(dep) * g_rx(arr)


def path_transfer(path: SpecularPath, scene: Scene, gains=None, grid: FrequencyGrid | None = None,
                  poses=None, reflectance=None) -> np.ndarray:
    """Complex spectrum of one path on ``grid.freqs`` (absolute delay d/c)."""
    d = path.length
    if d <= 0:
        raise GeometryError("path has zero length (coincident devices)")
    grid = grid or FrequencyGrid.for_length(int(RIR_LENGTH * SAMPLE_RATE))
    g_tx, g_rx = gains if gains is not None else (GainPattern.isotropic(), GainPattern.isotropic())
    pose_tx, pose_rx = poses if poses is not None else (None, None)
    dep = path.departure if pose_tx is None else pose_tx.to_local(path.departure)
    arr = path.arrival if pose_rx is None else pose_rx.to_local(path.arrival)
    refl = scene.reflectance() if reflectance is None else np.asarray(reflectance, float)
    f = grid.freqs
    w = band_weights(f)
    spec = np.ones_like(f)
    for s in path.segments:
        spec = spec * (refl[s] @ w)
    g = float(g_tx(dep)[0] * g_rx(arr)[0])
    return g / d * np.exp(-2j * np.pi * f * d / scene.speed_of_sound) * spec


def paths_spectrum(table: PathTable, amps: np.ndarray, delays: np.ndarray,
                   reflectance: np.ndarray, grid: FrequencyGrid) -> np.ndarray:
    """Sum over paths of amp * prod R(f) * exp(-2j pi f delay) on the grid bins."""
    r_table = np.ascontiguousarray(reflectance @ band_weights(grid.freqs)) if len(reflectance) else \
        np.ones((0, grid.n_bins))
    return kernels.accumulate_spectrum(np.ascontiguousarray(amps, dtype=float),
                                       np.ascontiguousarray(delays, dtype=float),
                                       np.ascontiguousarray(table.segs), r_table,
                                       float(grid.df), grid.n_bins)


def render_rir(scene: Scene, pose_tx: Pose, pose_rx: Pose, params=None,
               grid: FrequencyGrid | None = None, max_bounces: int = MAX_BOUNCES,
               length: float = RIR_LENGTH, onset: float | None = None,
               paths: list[SpecularPath] | None = None) -> Rir:
    """Sum of path responses, inverse-FFT'd to a real RIR.

    Tap 0 sits at ``onset`` (default: the earliest path delay). Paths whose
    delay relative to the onset falls outside the RIR window are dropped.
    ``params`` may be any object with ``gains()`` and ``reflectance()``;
    ``None`` means the scene's own materials and isotropic unit gains.
    """
    fs = grid.sample_rate if grid is not None else SAMPLE_RATE
    n = int(round(length * fs))
    grid = grid or FrequencyGrid.for_length(n, fs)
    if grid.n_fft < n:
        raise ValueError("FFT size shorter than the RIR")
    if paths is None:
        paths = enumerate_paths(scene, pose_tx.position, pose_rx.position, max_bounces)
    if not paths:
        return Rir(np.zeros(n), fs, 0.0 if onset is None else onset)
    c = scene.speed_of_sound
    table = PathTable.build(paths, scene.n_segments)
    g_tx, g_rx, refl = _gains_and_reflectance(scene, params)
    if onset is None:
        onset = float(table.length.min() / c)
    delays = table.length / c - onset
    keep = (delays >= -0.5 / fs) & (delays < n / fs)
    amps = path_gains(table, g_tx, g_rx, pose_tx, pose_rx) / table.length
    sub = PathTable(table.length[keep], table.segs[keep], table.counts[keep],
                    table.departure[keep], table.arrival[keep])
    spec = paths_spectrum(sub, amps[keep], delays[keep], refl, grid)
    h = np.fft.irfft(spec, grid.n_fft)[:n]
    return Rir(h, fs, max(onset, 0.0))


def image_lattice(size, src, rcv, max_order):
    """Closed-form image sources of a rectangular room [0, size].

    Returns (distance, reflections per axis (N, 3)). Independent of the mesh
    machinery; used as an oracle.
    """
    size = np.asarray(size, float)
    src = np.asarray(src, float)
    rcv = np.asarray(rcv, float)
    per_axis = []
    for ax in range(3):
        opts = []
        for nn in range(-max_order, max_order + 1):
            for q in (0, 1):
                order = abs(2 * nn - q)
                if order > max_order:
                    continue
                x = 2 * nn * size[ax] + (1 - 2 * q) * src[ax]
                opts.append((x, order))
        per_axis.append(opts)
    dists, orders = [], []
    for x, ox in per_axis[0]:
        for y, oy in per_axis[1]:
            if ox + oy > max_order:
                continue
            for z, oz in per_axis[2]:
                if ox + oy + oz > max_order:
                    continue
                dists.append(np.linalg.norm(np.array([x, y, z]) - rcv))
                orders.append((ox, oy, oz))
    return np.array(dists), np.array(orders)
