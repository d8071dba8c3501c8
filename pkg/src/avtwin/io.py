"""File formats: float32 WAV, PLY meshes, JSON scenes, JSON lines and CSV."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import jsonschema
import numpy as np
from plyfile import PlyData, PlyElement
from scipy.io import wavfile

from .geometry import (DEFAULT_COLOR_TOL, DEFAULT_NORMAL_TOL, SPEED_OF_SOUND, Pose, Scene,
                       SurfaceSegment, TriMesh)
from .scenes import _as_spectrum, build_scene, shoebox_scene
from .signals import SAMPLE_RATE, Rir, Waveform


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------- WAV

def write_wav(path, x, sample_rate=None):
    """Mono 32-bit float WAV. Accepts a Waveform, an Rir or an array."""
    if isinstance(x, (Waveform, Rir)):
        sample_rate = x.sample_rate
        x = x.samples if isinstance(x, Waveform) else x.taps
    sample_rate = SAMPLE_RATE if sample_rate is None else sample_rate
    if float(sample_rate) != int(sample_rate):
        raise FormatError("WAV needs an integer sample rate")
    wavfile.write(str(path), int(sample_rate), np.asarray(x, dtype=np.float32))


def read_wav(path, t0: float = 0.0) -> Waveform:
    try:
        fs, x = wavfile.read(str(path))
    except (ValueError, OSError) as e:
        raise FormatError(f"{path}: cannot read WAV ({e})") from e
    if x.ndim != 1:
        raise FormatError(f"{path}: expected mono audio, got {x.shape[1]} channels")
    if np.issubdtype(x.dtype, np.integer):
        info = np.iinfo(x.dtype)
        if info.min == 0:  # unsigned 8-bit
            x = (x.astype(float) - 128.0) / 128.0
        else:
            x = x.astype(float) / -float(info.min)
    return Waveform(x.astype(float), float(fs), t0)


def read_rir(path, onset: float = 0.0) -> Rir:
    w = read_wav(path)
    return Rir(w.samples, w.sample_rate, onset)


# ---------------------------------------------------------------- PLY

def read_ply(path) -> TriMesh:
    """Triangle mesh with per-face RGB (falls back to averaged vertex colours, then grey)."""
    try:
        ply = PlyData.read(str(path))
    except Exception as e:  # plyfile raises several unrelated types on malformed input
        raise FormatError(f"{path}: malformed PLY ({e})") from e
    names = [el.name for el in ply.elements]
    if "vertex" not in names or "face" not in names:
        raise FormatError(f"{path}: PLY needs vertex and face elements")
    v = ply["vertex"]
    verts = np.stack([np.asarray(v[k], float) for k in ("x", "y", "z")], axis=1)
    fdata = ply["face"].data
    key = "vertex_indices" if "vertex_indices" in fdata.dtype.names else "vertex_index"
    polys = fdata[key]
    tris, owner = [], []
    for i, poly in enumerate(polys):
        poly = np.asarray(poly, dtype=np.int64)
        for j in range(1, len(poly) - 1):  # fan-triangulate polygons
            tris.append((poly[0], poly[j], poly[j + 1]))
            owner.append(i)
    tris = np.array(tris, dtype=np.int64).reshape(-1, 3)
    owner = np.array(owner, dtype=np.int64)

    def rgb(data, n):
        cols = [c for c in ("red", "green", "blue") if c in data.dtype.names]
        if len(cols) != 3:
            return None
        c = np.stack([np.asarray(data[k], float) for k in cols], axis=1)
        return c / 255.0 if np.issubdtype(data["red"].dtype, np.integer) else c

    fc = rgb(fdata, len(polys))
    if fc is not None:
        colors = fc[owner]
    else:
        vc = rgb(v.data, len(verts))
        colors = vc[tris].mean(axis=1) if vc is not None else None
    try:
        return TriMesh(verts, tris, colors)
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from e


def write_ply(path, mesh: TriMesh, binary: bool = True):
    vert = np.empty(len(mesh.vertices), dtype=[("x", "<f8"), ("y", "<f8"), ("z", "<f8")])
    for i, k in enumerate("xyz"):
        vert[k] = mesh.vertices[:, i]
    face = np.empty(mesh.n_faces, dtype=[("vertex_indices", "i4", (3,)), ("red", "u1"),
                                          ("green", "u1"), ("blue", "u1")])
    face["vertex_indices"] = mesh.faces
    rgb = np.round(mesh.face_colors * 255).astype(np.uint8)
    face["red"], face["green"], face["blue"] = rgb[:, 0], rgb[:, 1], rgb[:, 2]
    PlyData([PlyElement.describe(vert, "vertex"), PlyElement.describe(face, "face")],
            text=not binary, byte_order="<").write(str(path))


# ---------------------------------------------------------------- scenes

_BANDS = {"oneOf": [{"type": "number", "minimum": 0, "maximum": 1},
                    {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1},
                     "minItems": 7, "maxItems": 7}]}

SCENE_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "mesh": {"type": "string"},
        "shoebox": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "size": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0},
                         "minItems": 3, "maxItems": 3},
                "subdiv": {"type": "integer", "minimum": 1},
                "walls": {"type": "array", "items": _BANDS, "minItems": 6, "maxItems": 6},
            },
            "required": ["size"],
        },
        "materials": {"type": "object", "additionalProperties": _BANDS},
        "segments": {"type": "object", "additionalProperties": {"type": "string"}},
        "face_segments": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "default_material": {"type": "string"},
        "speed_of_sound": {"type": "number", "exclusiveMinimum": 0},
        "color_tol": {"type": "number", "minimum": 0},
        "normal_tol": {"type": "number", "minimum": 0},
    },
    "oneOf": [{"required": ["mesh"]}, {"required": ["shoebox"]}, {"not": {"anyOf": [
        {"required": ["mesh"]}, {"required": ["shoebox"]}]}}],
}


def load_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: malformed JSON ({e})") from e


def validate(doc, schema, what="document"):
    try:
        jsonschema.validate(doc, schema)
    except jsonschema.ValidationError as e:
        loc = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise FormatError(f"invalid {what} at {loc}: {e.message}") from e


def scene_from_dict(doc: dict, base_dir=".") -> Scene:
    """Scene from its JSON description.

    Either ``mesh`` (a PLY path, relative to the JSON file) with a
    segment -> material map, or ``shoebox`` with six wall spectra. With
    neither, the scene is free field.
    """
    validate(doc, SCENE_SCHEMA, "scene")
    c = doc.get("speed_of_sound", SPEED_OF_SOUND)
    if "shoebox" in doc:
        sb = doc["shoebox"]
        walls = sb.get("walls", [0.9] * 6)
        return shoebox_scene(tuple(sb["size"]), walls, sb.get("subdiv", 1), c)
    if "mesh" not in doc:
        return Scene.free_field(c)
    mesh = read_ply(Path(base_dir) / doc["mesh"])
    seg_map = {int(k): v for k, v in doc.get("segments", {}).items()}
    mats = doc.get("materials", {})
    default = doc.get("default_material", "default")
    for name in set(seg_map.values()) | {default}:
        if name not in mats and name != "default":
            raise FormatError(f"scene references unknown material {name!r}")
    if "face_segments" in doc:
        scene = _labelled_scene(mesh, doc["face_segments"], mats, seg_map, default, c)
    else:
        scene = build_scene(mesh, mats, seg_map, default, doc.get("color_tol", DEFAULT_COLOR_TOL),
                            doc.get("normal_tol", DEFAULT_NORMAL_TOL), c)
    bad = [k for k in seg_map if k >= scene.n_segments]
    if bad:
        raise FormatError(f"scene binds materials to missing segments {bad}")
    return scene


def _labelled_scene(mesh, labels, mats, seg_map, default, c) -> Scene:
    """Scene from explicit per-face segment labels (no region growing)."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) != mesh.n_faces:
        raise FormatError(f"face_segments has {len(labels)} entries for {mesh.n_faces} faces")
    n = int(labels.max()) + 1 if len(labels) else 0
    mats = {name: _as_spectrum(v) for name, v in mats.items()}
    mats.setdefault(default, _as_spectrum(0.5))
    segs = []
    for i in range(n):
        faces = np.nonzero(labels == i)[0]
        if not len(faces):
            raise FormatError(f"face_segments skips segment {i}")
        color = mesh.face_colors[faces].mean(axis=0)
        segs.append(SurfaceSegment(i, faces, color, seg_map.get(i, default)))
    return Scene(mesh, tuple(segs), mats, c)


def load_scene(path) -> Scene:
    return scene_from_dict(load_json(path), Path(path).parent)


def save_scene(scene: Scene, path) -> None:
    """Write ``scene`` as JSON plus a binary PLY next to it (same stem).

    Segment ids are stored per face, so reloading reproduces the exact
    segmentation even after edits that region growing would merge.
    """
    path = Path(path)
    doc = {"speed_of_sound": scene.speed_of_sound}
    if scene.mesh is not None:
        ply = path.with_suffix(".ply")
        write_ply(ply, scene.mesh)
        doc["mesh"] = ply.name
        doc["face_segments"] = [int(x) for x in scene.face_segment]
        doc["segments"] = {str(s.id): s.material for s in scene.segments}
        used = sorted({s.material for s in scene.segments})
        doc["materials"] = {m: list(scene.materials[m].bands) for m in used}
        doc["default_material"] = used[0] if used else "default"
    path.write_text(json.dumps(doc, sort_keys=True) + "\n")


# ---------------------------------------------------------------- records

def write_jsonl(path, rows):
    with open(path, "w") as f:
        for r in rows:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def read_jsonl(path) -> list:
    out = []
    with open(path) as f:
        for i, line in enumerate(f):
            if line.strip():
                try:
                    out.append(json.loads(line))
                except json.JSONDecodeError as e:
                    raise FormatError(f"{path}:{i + 1}: malformed JSON line ({e})") from e
    return out


def write_events_csv(path, events):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("time_s", "corr"))
        for e in events:
            w.writerow((repr(float(e.time)), repr(float(e.corr_coeff))))


# ---------------------------------------------------------------- RIR sets

INDEX_NAME = "index.jsonl"


def write_rir_set(directory, entries):
    """A directory of float32 WAV RIRs plus ``index.jsonl``.

    ``entries`` holds dicts with an ``rir`` (Rir) and any JSON-able metadata
    (poses as ``Pose``); each index line gets ``wav`` and ``onset`` added.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, e in enumerate(entries):
        e = dict(e)
        rir = e.pop("rir")
        name = e.pop("wav", None) or f"rir_{i:04d}.wav"
        write_wav(d / name, rir)
        row = {"wav": name, "onset": rir.onset}
        for k, v in e.items():
            row[k] = v.to_dict() if isinstance(v, Pose) else v
        rows.append(row)
    write_jsonl(d / INDEX_NAME, rows)
    return rows


def read_rir_set(path) -> list:
    """``[(Rir, meta)]`` from a RIR-set directory or a single WAV file.

    Poses in the metadata come back as ``Pose``. A directory without an
    index is read as its sorted WAV files with onset 0.
    """
    p = Path(path)
    if not p.exists():
        raise FormatError(f"{p}: no such file or directory")
    if p.is_file():
        return [(read_rir(p), {"wav": p.name})]
    if not (p / INDEX_NAME).exists():
        return [(read_rir(w), {"wav": w.name}) for w in sorted(p.glob("*.wav"))]
    out = []
    for row in read_jsonl(p / INDEX_NAME):
        if "wav" not in row:
            raise FormatError(f"{p / INDEX_NAME}: entry without a wav name")
        meta = dict(row)
        for k in ("pose_tx", "pose_rx"):
            if k in meta:
                meta[k] = Pose.from_dict(meta[k])
        out.append((read_rir(p / row["wav"], float(row.get("onset", 0.0))), meta))
    return out
