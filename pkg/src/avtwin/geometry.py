"""Scene geometry: poses, triangle meshes, ray casting and segmentation."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple

import numpy as np

from . import kernels

RAY_EPS = 1e-4  # metres; origin offset that stops self-hits after a bounce
DEFAULT_COLOR_TOL = 0.15
DEFAULT_NORMAL_TOL = 15.0
SPEED_OF_SOUND = 343.0


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class Pose:
    """Device position (metres) and orientation as a unit quaternion (w, x, y, z)."""

    position: np.ndarray
    orientation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        p = np.asarray(self.position, dtype=float).reshape(3)
        q = np.asarray(self.orientation, dtype=float).reshape(4)
        if abs(np.linalg.norm(q) - 1.0) > 1e-6:
            raise GeometryError(f"orientation must be a unit quaternion, |q| = {np.linalg.norm(q)}")
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "orientation", q)

    @classmethod
    def at(cls, x, y, z):
        return cls(np.array([x, y, z], dtype=float))

    @property
    def rotation(self) -> np.ndarray:
        w, x, y, z = self.orientation
        return np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ])

    def to_local(self, dirs):
        """World-frame direction(s) expressed in the device frame."""
        return np.asarray(dirs, dtype=float) @ self.rotation

    def to_dict(self):
        return {"position": self.position.tolist(), "orientation": self.orientation.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["position"], float),
                   np.asarray(d.get("orientation", [1.0, 0.0, 0.0, 0.0]), float))


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    h = 0.5 * angle
    return np.concatenate([[np.cos(h)], np.sin(h) * axis])


class BVH(NamedTuple):
    tri: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    count: np.ndarray
    order: np.ndarray


def build_bvh(tri: np.ndarray, leaf_size: int = 4) -> BVH:
    """Median-split bounding-volume hierarchy over triangles ``tri`` (F, 3, 3)."""
    tri = np.ascontiguousarray(tri, dtype=float)
    n = tri.shape[0]
    tmin = tri.min(axis=1)
    tmax = tri.max(axis=1)
    cent = tri.mean(axis=1)
    order = np.arange(n, dtype=np.int64)
    lo, hi, left, right, start, count = [], [], [], [], [], []

    def new_node(s, e):
        idx = order[s:e]
        if len(idx):
            lo.append(tmin[idx].min(axis=0))
            hi.append(tmax[idx].max(axis=0))
        else:
            lo.append(np.full(3, np.inf))
            hi.append(np.full(3, -np.inf))
        left.append(-1)
        right.append(-1)
        start.append(s)
        count.append(e - s)
        return len(lo) - 1

    root = new_node(0, n)
    stack = [(root, 0, n)]
    while stack:
        node, s, e = stack.pop()
        if e - s <= leaf_size:
            continue
        c = cent[order[s:e]]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        srt = np.argsort(c[:, axis], kind="stable")
        order[s:e] = order[s:e][srt]
        mid = (s + e) // 2
        a = new_node(s, mid)
        b = new_node(mid, e)
        left[node] = a
        right[node] = b
        count[node] = 0
        stack.append((b, mid, e))
        stack.append((a, s, mid))

    return BVH(tri, np.array(lo), np.array(hi), np.array(left, dtype=np.int64),
               np.array(right, dtype=np.int64), np.array(start, dtype=np.int64),
               np.array(count, dtype=np.int64), order)


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Triangle mesh with per-face RGB colours in [0, 1].

    Zero-area faces are dropped at construction; face normals follow the
    right-hand winding of each face.
    """

    vertices: np.ndarray
    faces: np.ndarray
    face_colors: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise GeometryError("face index out of range")
        c = self.face_colors
        c = np.full((len(f), 3), 0.5) if c is None else np.asarray(c, dtype=float).reshape(-1, 3)
        if len(c) != len(f):
            raise GeometryError("face_colors must have one row per face")
        if len(f):
            tri = v[f]
            area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
            keep = area > 1e-12
            f, c = f[keep], c[keep]
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        object.__setattr__(self, "face_colors", np.clip(c, 0.0, 1.0))

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @cached_property
    def triangles(self) -> np.ndarray:
        return np.ascontiguousarray(self.vertices[self.faces])

    @cached_property
    def _cross(self) -> np.ndarray:
        t = self.triangles
        return np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])

    @cached_property
    def areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self._cross, axis=1)

    @cached_property
    def face_normals(self) -> np.ndarray:
        c = self._cross
        return c / np.linalg.norm(c, axis=1, keepdims=True)

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.triangles.mean(axis=1)

    @cached_property
    def bvh(self) -> BVH:
        return build_bvh(self.triangles)

    @property
    def bounds(self):
        if len(self.vertices) == 0:
            return np.zeros(3), np.zeros(3)
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    @cached_property
    def adjacency(self) -> list[list[int]]:
        """Faces sharing an edge, sorted by index."""
        edges = {}
        for fi, (a, b, c) in enumerate(self.faces):
            for e in ((a, b), (b, c), (c, a)):
                edges.setdefault((min(e), max(e)), []).append(fi)
        nbrs = [set() for _ in range(self.n_faces)]
        for fs in edges.values():
            for x in fs:
                nbrs[x].update(fs)
        return [sorted(s - {i}) for i, s in enumerate(nbrs)]

    def transformed(self, rotation=None, translation=None) -> "TriMesh":
        v = self.vertices
        if rotation is not None:
            v = v @ np.asarray(rotation, float).T
        if translation is not None:
            v = v + np.asarray(translation, float)
        return TriMesh(v, self.faces, self.face_colors)

    def merged(self, other: "TriMesh") -> "TriMesh":
        return TriMesh(np.vstack([self.vertices, other.vertices]),
                       np.vstack([self.faces, other.faces + len(self.vertices)]),
                       np.vstack([self.face_colors, other.face_colors]))

    def submesh(self, face_ids) -> "TriMesh":
        face_ids = np.asarray(face_ids, dtype=np.int64)
        f = self.faces[face_ids]
        used, inv = np.unique(f, return_inverse=True)
        return TriMesh(self.vertices[used], inv.reshape(-1, 3), self.face_colors[face_ids])


def welded(vertices, faces, decimals=9):
    """Merge coincident vertices so that neighbouring faces share edges."""
    v = np.asarray(vertices, float)
    key = np.round(v, decimals)
    uniq, first, inv = np.unique(key, axis=0, return_index=True, return_inverse=True)
    return v[first], inv.reshape(-1)[np.asarray(faces)]


def _grid_quad(origin, u, v, nu, nv):
    """Triangulated parallelogram origin + [0,1]u + [0,1]v, normal along u x v."""
    verts, faces = [], []
    for i in range(nu + 1):
        for j in range(nv + 1):
            verts.append(origin + u * (i / nu) + v * (j / nv))
    for i in range(nu):
        for j in range(nv):
            a = i * (nv + 1) + j
            b = (i + 1) * (nv + 1) + j
            faces.append((a, b, b + 1))
            faces.append((a, b + 1, a + 1))
    return np.array(verts), np.array(faces)


def box_mesh(lo, hi, inward=False, subdiv=1, colors=None):
    """Axis-aligned box; faces grouped per side in order -x, +x, -y, +y, -z, +z.

    ``inward=True`` orients normals into the box (a room); otherwise outward
    (an object). ``colors`` is one RGB per side or a single RGB.
    """
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    ext = hi - lo
    ex, ey, ez = np.diag(ext)
    # outward-facing sides: (origin, u, v) with u x v pointing out
    sides = [
        (lo, ez, ey),
        (lo + ex, ey, ez),
        (lo, ex, ez),
        (lo + ey, ez, ex),
        (lo, ey, ex),
        (lo + ez, ex, ey),
    ]
    if colors is None:
        colors = np.full((6, 3), 0.6)
    colors = np.asarray(colors, float)
    if colors.ndim == 1:
        colors = np.tile(colors, (6, 1))
    n = max(1, int(subdiv))
    verts, faces, cols = [], [], []
    off = 0
    for k, (o, u, v) in enumerate(sides):
        if inward:
            u, v = v, u
        vv, ff = _grid_quad(o, u, v, n, n)
        verts.append(vv)
        faces.append(ff + off)
        cols.append(np.tile(colors[k], (len(ff), 1)))
        off += len(vv)
    v, f = welded(np.vstack(verts), np.vstack(faces))
    return TriMesh(v, f, np.vstack(cols))


def shoebox_mesh(size, subdiv=1, colors=None):
    """Closed rectangular room [0, size] with inward-facing normals."""
    if colors is None:
        colors = np.array([[0.8, 0.2, 0.2], [0.2, 0.8, 0.2], [0.2, 0.2, 0.8],
                           [0.8, 0.8, 0.2], [0.2, 0.8, 0.8], [0.8, 0.2, 0.8]])
    return box_mesh(np.zeros(3), np.asarray(size, float), inward=True, subdiv=subdiv, colors=colors)


class Hit(NamedTuple):
    point: np.ndarray
    face: int
    distance: float


def cast_rays(mesh: TriMesh, origins, dirs, tmin=RAY_EPS, tmax=None):
    """Batched first-hit query. Returns (distance, face) with inf / -1 for misses."""
    origins = np.ascontiguousarray(np.atleast_2d(origins), dtype=float)
    dirs = np.ascontiguousarray(np.atleast_2d(dirs), dtype=float)
    n = len(origins)
    if tmax is None:
        tmax = np.full(n, np.inf)
    tmax = np.ascontiguousarray(np.broadcast_to(np.asarray(tmax, float), (n,)))
    if mesh is None or mesh.n_faces == 0:
        return np.full(n, np.inf), np.full(n, -1, dtype=np.int64)
    return kernels.first_hit(origins, dirs, float(tmin), tmax, *mesh.bvh)


def ray_cast_first_hit(mesh: TriMesh, origin, direction) -> Hit | None:
    """Nearest intersection with distance > RAY_EPS, or None on a miss."""
    d = np.asarray(direction, float)
    if abs(np.linalg.norm(d) - 1.0) > 1e-6:
        raise GeometryError("ray direction must be unit length")
    o = np.asarray(origin, float)
    t, f = cast_rays(mesh, o[None], d[None])
    if f[0] < 0:
        return None
    return Hit(o + t[0] * d, int(f[0]), float(t[0]))


def point_mesh_distance(mesh: TriMesh, p) -> float:
    """Euclidean distance from a point to the closest triangle (all-face scan)."""
    if mesh is None or mesh.n_faces == 0:
        return np.inf
    p = np.asarray(p, float)
    t = mesh.triangles
    a, b, c = t[:, 0], t[:, 1], t[:, 2]
    ab, ac, ap = b - a, c - a, p - a
    n = np.cross(ab, ac)
    nn = np.einsum("ij,ij->i", n, n)
    # barycentric of the plane projection
    proj = p - (np.einsum("ij,ij->i", ap, n) / nn)[:, None] * n
    v0, v1, v2 = ab, ac, proj - a
    d00 = np.einsum("ij,ij->i", v0, v0)
    d01 = np.einsum("ij,ij->i", v0, v1)
    d11 = np.einsum("ij,ij->i", v1, v1)
    d20 = np.einsum("ij,ij->i", v2, v0)
    d21 = np.einsum("ij,ij->i", v2, v1)
    den = d00 * d11 - d01 * d01
    bv = (d11 * d20 - d01 * d21) / den
    bw = (d00 * d21 - d01 * d20) / den
    inside = (bv >= 0) & (bw >= 0) & (bv + bw <= 1)
    dist = np.where(inside, np.linalg.norm(p - proj, axis=1), np.inf)

    def seg(x, y):
        xy = y - x
        s = np.clip(np.einsum("ij,ij->i", p - x, xy) / np.einsum("ij,ij->i", xy, xy), 0, 1)
        return np.linalg.norm(p - (x + s[:, None] * xy), axis=1)

    dist = np.minimum(dist, np.minimum(seg(a, b), np.minimum(seg(b, c), seg(c, a))))
    return float(dist.min())


@dataclass(frozen=True)
class SurfaceSegment:
    id: int
    faces: np.ndarray
    color: np.ndarray
    material: str | None = None

    def with_material(self, material: str) -> "SurfaceSegment":
        return SurfaceSegment(self.id, self.faces, self.color, material)


def segment_mesh(mesh: TriMesh, color_tol: float = DEFAULT_COLOR_TOL,
                 normal_tol: float = DEFAULT_NORMAL_TOL) -> list[SurfaceSegment]:
    """Region growing over edge-adjacent faces.

    Seeds are taken in face-index order. A neighbour joins the growing region
    when its colour lies within ``color_tol`` (Euclidean RGB) of the region's
    area-weighted mean colour and its normal lies within ``normal_tol``
    degrees of the region's mean normal.
    """
    n = mesh.n_faces
    labels = np.full(n, -1, dtype=np.int64)
    colors = mesh.face_colors
    normals = mesh.face_normals
    areas = mesh.areas
    adj = mesh.adjacency
    cos_tol = np.cos(np.radians(min(float(normal_tol), 180.0)))
    segments = []
    for seed in range(n):
        if labels[seed] >= 0:
            continue
        rid = len(segments)
        labels[seed] = rid
        members = [seed]
        csum = colors[seed] * areas[seed]
        nsum = normals[seed] * areas[seed]
        asum = areas[seed]
        queue = deque([seed])
        while queue:
            f = queue.popleft()
            for g in adj[f]:
                if labels[g] >= 0:
                    continue
                if np.linalg.norm(colors[g] - csum / asum) > color_tol:
                    continue
                nrm = np.linalg.norm(nsum)
                cosang = float(normals[g] @ nsum) / nrm if nrm > 1e-12 else 0.0
                if normal_tol < 180.0 and cosang < cos_tol - 1e-12:
                    continue
                labels[g] = rid
                members.append(g)
                csum = csum + colors[g] * areas[g]
                nsum = nsum + normals[g] * areas[g]
                asum += areas[g]
                queue.append(g)
        segments.append(SurfaceSegment(rid, np.array(sorted(members), dtype=np.int64), csum / asum))
    return segments


def sphere_directions(k: int) -> np.ndarray:
    """Fibonacci-lattice unit vectors, deterministic in ``k``."""
    k = int(k)
    if k < 1:
        raise GeometryError("need at least one direction")
    i = np.arange(k) + 0.5
    z = 1.0 - 2.0 * i / k
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    phi = i * np.pi * (3.0 - np.sqrt(5.0))
    d = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    return d / np.linalg.norm(d, axis=1, keepdims=True)


@dataclass(frozen=True, eq=False)
class Scene:
    """Mesh, its segmentation, a material table and the speed of sound.

    ``materials`` maps material names to objects exposing ``bands`` (seven
    reflection amplitudes); each segment names its material.
    """

    mesh: TriMesh | None
    segments: tuple
    materials: dict
    speed_of_sound: float = SPEED_OF_SOUND

    def __post_init__(self):
        segs = tuple(self.segments)
        object.__setattr__(self, "segments", segs)
        if self.speed_of_sound <= 0:
            raise GeometryError("speed_of_sound must be positive")
        for i, s in enumerate(segs):
            if s.id != i:
                raise GeometryError("segment ids must be 0..S-1 in order")
            if s.material not in self.materials:
                raise GeometryError(f"segment {s.id} has no material ({s.material!r})")
        if segs:
            allf = np.concatenate([s.faces for s in segs])
            nf = self.mesh.n_faces if self.mesh is not None else 0
            if len(allf) != nf or len(np.unique(allf)) != nf:
                raise GeometryError("segments must partition the face set")

    @classmethod
    def free_field(cls, speed_of_sound=SPEED_OF_SOUND):
        return cls(None, (), {}, speed_of_sound)

    @property
    def n_segments(self) -> int:
        return len(self.segments)

    @cached_property
    def face_segment(self) -> np.ndarray:
        nf = self.mesh.n_faces if self.mesh is not None else 0
        out = np.full(nf, -1, dtype=np.int64)
        for s in self.segments:
            out[s.faces] = s.id
        return out

    def reflectance(self) -> np.ndarray:
        """(S, 7) band reflection amplitudes in segment order."""
        if not self.segments:
            return np.zeros((0, 7))
        return np.array([np.asarray(self.materials[s.material].bands, float) for s in self.segments])

    def contains(self, p, margin=0.0) -> bool:
        if self.mesh is None:
            return True
        lo, hi = self.mesh.bounds
        p = np.asarray(p, float)
        return bool(np.all(p >= lo - margin) and np.all(p <= hi + margin))
