"""Scene edits with re-rendering, and RIR-fingerprint localization."""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .geometry import (DEFAULT_COLOR_TOL, DEFAULT_NORMAL_TOL, GeometryError, Pose, Scene,
                       SurfaceSegment, TriMesh, quat_from_axis_angle, segment_mesh)
from .raytrace import MaterialSpectrum
from .signals import Rir

EDIT_KINDS = ("set_material", "insert_mesh", "remove_segment", "move_segment")
N_FEATURES = 64
FEATURE_SPAN = 0.3  # seconds of absolute time covered by the features
FEATURE_T_MIN = 1e-3  # first log-spaced bin edge; bin 0 covers [0, FEATURE_T_MIN)
K_NEIGHBORS = 5
IDW_EPS = 1e-6
_DB_MAGIC = b"AVTRIRDB"
DB_VERSION = 1


class EditError(ValueError):
    pass


@dataclass(frozen=True)
class EditOp:
    kind: str
    payload: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in EDIT_KINDS:
            raise EditError(f"unknown edit kind {self.kind!r}; expected one of {EDIT_KINDS}")

    @classmethod
    def set_material(cls, segments, material, bands=None):
        return cls("set_material", {"segments": segments, "material": material, "bands": bands})

    @classmethod
    def insert_mesh(cls, mesh: TriMesh, material, bands=None, color_tol=DEFAULT_COLOR_TOL,
                    normal_tol=DEFAULT_NORMAL_TOL):
        return cls("insert_mesh", {"mesh": mesh, "material": material, "bands": bands,
                                   "color_tol": color_tol, "normal_tol": normal_tol})

    @classmethod
    def remove_segment(cls, segment):
        return cls("remove_segment", {"segment": segment})

    @classmethod
    def move_segment(cls, segment, translation=(0.0, 0.0, 0.0), axis=(0.0, 0.0, 1.0), angle=0.0):
        return cls("move_segment", {"segment": segment, "translation": list(translation),
                                    "axis": list(axis), "angle": angle})


def _segment_ids(scene: Scene, spec) -> list[int]:
    if isinstance(spec, str) and spec == "all":
        return list(range(scene.n_segments))
    ids = [spec] if np.ndim(spec) == 0 else list(spec)
    out = []
    for i in ids:
        if not isinstance(i, (int, np.integer)) or not 0 <= int(i) < scene.n_segments:
            raise EditError(f"segment {i!r} does not exist")
        out.append(int(i))
    return out


def _materials_with(scene: Scene, name, bands):
    mats = dict(scene.materials)
    if bands is not None:
        b = np.broadcast_to(np.asarray(bands, float), (7,))
        mats[name] = MaterialSpectrum(tuple(float(x) for x in b))
    elif name not in mats:
        raise EditError(f"material {name!r} does not exist; give its bands")
    return mats


def apply_edit(scene: Scene, op: EditOp) -> Scene:
    """Return an edited copy of ``scene``; the input is never modified."""
    p = op.payload
    if op.kind == "set_material":
        ids = set(_segment_ids(scene, p["segments"]))
        mats = _materials_with(scene, p["material"], p.get("bands"))
        segs = [s.with_material(p["material"]) if s.id in ids else s for s in scene.segments]
        return Scene(scene.mesh, tuple(segs), mats, scene.speed_of_sound)

    if op.kind == "insert_mesh":
        new = p["mesh"]
        if not isinstance(new, TriMesh) or new.n_faces == 0:
            raise EditError("insert_mesh needs a non-empty TriMesh")
        mats = _materials_with(scene, p["material"], p.get("bands"))
        base = scene.mesh
        nf0 = base.n_faces if base is not None else 0
        mesh = new if base is None else base.merged(new)
        if mesh.n_faces != nf0 + new.n_faces:
            raise EditError("inserted mesh lost faces on merge")
        # only the inserted faces are segmented; existing segments keep their ids
        fresh = segment_mesh(new, p.get("color_tol", DEFAULT_COLOR_TOL),
                             p.get("normal_tol", DEFAULT_NORMAL_TOL))
        segs = list(scene.segments)
        for s in fresh:
            segs.append(SurfaceSegment(len(segs), s.faces + nf0, s.color, p["material"]))
        return Scene(mesh, tuple(segs), mats, scene.speed_of_sound)

    if op.kind == "remove_segment":
        (sid,) = _segment_ids(scene, p["segment"])
        keep = np.ones(scene.mesh.n_faces, dtype=bool)
        keep[scene.segments[sid].faces] = False
        new_index = np.cumsum(keep) - 1
        mesh = scene.mesh.submesh(np.nonzero(keep)[0])
        segs = []
        for s in scene.segments:
            if s.id == sid:
                continue
            segs.append(SurfaceSegment(len(segs), new_index[s.faces], s.color, s.material))
        return Scene(mesh, tuple(segs), dict(scene.materials), scene.speed_of_sound)

    if op.kind == "move_segment":
        (sid,) = _segment_ids(scene, p["segment"])
        seg = scene.segments[sid]
        mesh = scene.mesh
        f = mesh.faces[seg.faces]
        used, inv = np.unique(f, return_inverse=True)
        pts = mesh.vertices[used]
        angle = float(p.get("angle", 0.0))
        if angle:
            rot = Pose(np.zeros(3), quat_from_axis_angle(p.get("axis", (0, 0, 1)), angle)).rotation
            c = pts.mean(axis=0)
            pts = (pts - c) @ rot.T + c
        pts = pts + np.asarray(p.get("translation", (0, 0, 0)), float)
        # moved faces get their own vertex copies so neighbours are not dragged along
        verts = np.vstack([mesh.vertices, pts])
        faces = mesh.faces.copy()
        faces[seg.faces] = inv.reshape(-1, 3) + len(mesh.vertices)
        moved = TriMesh(verts, faces, mesh.face_colors)
        if moved.n_faces != mesh.n_faces:
            raise EditError("move produced degenerate faces")
        return Scene(moved, scene.segments, dict(scene.materials), scene.speed_of_sound)

    raise EditError(f"unhandled edit kind {op.kind}")


def apply_edits(scene: Scene, ops) -> Scene:
    for op in ops:
        scene = apply_edit(scene, op)
    return scene


# ---------------------------------------------------------------- localization

def feature_edges(n: int = N_FEATURES, span: float = FEATURE_SPAN, t_min: float = FEATURE_T_MIN):
    return np.concatenate([[0.0], np.geomspace(t_min, span, n)])


def featurize(rir: Rir, n: int = N_FEATURES, span: float = FEATURE_SPAN) -> np.ndarray:
    """Log-spaced RMS envelope bins (dB) on the absolute time axis."""
    h = rir.absolute().taps
    fs = rir.sample_rate
    edges = np.round(feature_edges(n, span) * fs).astype(int)
    edges = np.maximum.accumulate(np.maximum(edges, np.arange(len(edges))))
    hh = np.zeros(edges[-1])
    m = min(len(h), len(hh))
    hh[:m] = h[:m]
    e2 = np.concatenate([[0.0], np.cumsum(hh * hh)])
    energy = (e2[edges[1:]] - e2[edges[:-1]]) / np.diff(edges)
    return 10 * np.log10(np.maximum(energy, 0.0) + 1e-12)


@dataclass(frozen=True, eq=False)
class RirDatabase:
    positions: np.ndarray  # (N, 3)
    features: np.ndarray  # (N, D)
    sources: tuple  # "measured" | "synthesized" per entry
    pose_tx: Pose | None = None

    def __post_init__(self):
        pos = np.asarray(self.positions, float).reshape(-1, 3)
        feat = np.asarray(self.features, float)
        feat = feat.reshape(len(pos), -1) if feat.size else np.zeros((len(pos), N_FEATURES))
        if len(self.sources) != len(pos):
            raise ValueError("one source tag per entry")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "features", feat)
        object.__setattr__(self, "sources", tuple(self.sources))

    @classmethod
    def build(cls, positions, rirs, source="measured", pose_tx=None) -> "RirDatabase":
        feats = [featurize(r) for r in rirs]
        return cls(np.asarray(positions, float).reshape(-1, 3),
                   np.array(feats).reshape(len(feats), -1), (source,) * len(feats), pose_tx)

    def __len__(self):
        return len(self.positions)

    def extended(self, positions, features, source) -> "RirDatabase":
        positions = np.asarray(positions, float).reshape(-1, 3)
        features = np.asarray(features, float).reshape(len(positions), self.features.shape[1])
        return RirDatabase(np.vstack([self.positions, positions]),
                           np.vstack([self.features, features]),
                           self.sources + (source,) * len(positions), self.pose_tx)

    def to_bytes(self) -> bytes:
        header = {"format": "avtwin-rirdb", "version": DB_VERSION, "n": len(self),
                  "dim": int(self.features.shape[1]), "sources": list(self.sources),
                  "pose_tx": self.pose_tx.to_dict() if self.pose_tx is not None else None,
                  "dtype": "<f8"}
        hb = json.dumps(header, sort_keys=True).encode()
        buf = io.BytesIO()
        buf.write(_DB_MAGIC)
        buf.write(struct.pack("<I", len(hb)))
        buf.write(hb)
        buf.write(self.positions.astype("<f8").tobytes())
        buf.write(self.features.astype("<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "RirDatabase":
        if data[:len(_DB_MAGIC)] != _DB_MAGIC:
            raise ValueError("not an RIR database blob")
        off = len(_DB_MAGIC)
        n = struct.unpack("<I", data[off:off + 4])[0]
        h = json.loads(data[off + 4:off + 4 + n])
        if h.get("version") != DB_VERSION:
            raise ValueError(f"unsupported database version {h.get('version')}")
        body = np.frombuffer(data[off + 4 + n:], dtype="<f8")
        pos = body[:3 * h["n"]].reshape(h["n"], 3)
        feat = body[3 * h["n"]:].reshape(h["n"], h["dim"])
        tx = Pose.from_dict(h["pose_tx"]) if h["pose_tx"] else None
        return cls(pos.copy(), feat.copy(), tuple(h["sources"]), tx)


def localize(db: RirDatabase, query, k: int = K_NEIGHBORS, eps: float = IDW_EPS) -> np.ndarray:
    """Inverse-distance-weighted mean position of the k nearest feature vectors."""
    if len(db) == 0:
        raise ValueError("empty RIR database")
    q = featurize(query) if isinstance(query, Rir) else np.asarray(query, float)
    if q.shape != db.features.shape[1:]:
        raise ValueError("query features do not match the database dimension")
    d = np.linalg.norm(db.features - q, axis=1)
    k = min(k, len(db))
    nn = np.argsort(d, kind="stable")[:k]
    exact = nn[d[nn] == 0]
    if len(exact):
        return db.positions[exact].mean(axis=0)
    w = 1.0 / (d[nn] + eps)
    return (w[:, None] * db.positions[nn]).sum(axis=0) / w.sum()


def grid_positions(lo, hi, shape) -> np.ndarray:
    """Cell-centred grid of ``shape`` (nx, ny, nz) points inside the box [lo, hi]."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    axes = [lo[i] + (np.arange(n) + 0.5) * (hi[i] - lo[i]) / n for i, n in enumerate(shape)]
    g = np.meshgrid(*axes, indexing="ij")
    return np.stack([a.ravel() for a in g], axis=1)


def augment_database(db: RirDatabase, renderer, positions) -> RirDatabase:
    """Append renderer-synthesized entries; ``renderer(Pose) -> Rir``."""
    positions = np.asarray(positions, float).reshape(-1, 3)
    if len(positions) == 0:
        return db
    feats = [featurize(renderer(Pose(p))) for p in positions]
    return db.extended(positions, np.array(feats), "synthesized")


def raytrace_renderer(scene: Scene, pose_tx: Pose, **kwargs):
    """Renderer callable backed by the specular ray tracer (absolute time axis)."""
    from .raytrace import render_rir

    def render(pose_rx: Pose) -> Rir:
        return render_rir(scene, pose_tx, pose_rx, onset=0.0, **kwargs)
    return render


def field_renderer(model):
    from .field import render_field

    def render(pose_rx: Pose) -> Rir:
        return render_field(model, pose_rx)
    return render


__all__ = ["EditOp", "apply_edit", "apply_edits", "RirDatabase", "featurize", "localize",
           "augment_database", "grid_positions", "raytrace_renderer", "field_renderer", "GeometryError"]
