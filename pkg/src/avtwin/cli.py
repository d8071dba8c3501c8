"""``avtwin`` command line: file-based pipelines over every module.

Each subcommand takes its parameters from flags and/or a JSON ``--config``
file (flags win). Unknown config keys are rejected, the fully resolved
config is echoed to stdout as one JSON line, and all randomness comes from
the ``seed`` values in that config.

Exit codes: 0 success, 2 usage or config error, 1 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import partial
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from ._accel import BACKEND

log = logging.getLogger("avtwin")


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class Opt:
    name: str
    kind: str  # float | nfloat | int | nint | str | nstr | bool | vec3 | floats | ints | choice
    default: object = None
    help: str = ""
    required: bool = False
    positional: bool = False
    short: str | None = None
    choices: tuple = ()


_SCHEMA_TYPES = {
    "float": {"type": "number"},
    "nfloat": {"type": ["number", "null"]},
    "int": {"type": "integer"},
    "nint": {"type": ["integer", "null"]},
    "str": {"type": "string"},
    "nstr": {"type": ["string", "null"]},
    "bool": {"type": "boolean"},
    "vec3": {"type": ["array", "null"], "items": {"type": "number"}, "minItems": 3, "maxItems": 3},
    "floats": {"type": "array", "items": {"type": "number"}},
    "ints": {"type": "array", "items": {"type": "integer"}},
}


def _none_or(t):
    def conv(s):
        return None if s.lower() in ("none", "null") else t(s)
    conv.__name__ = t.__name__
    return conv


def _opt_schema(o: Opt) -> dict:
    if o.kind == "choice":
        return {"enum": list(o.choices)}
    return dict(_SCHEMA_TYPES[o.kind])


def _add(parser, o: Opt):
    dflt = "required" if o.required else json.dumps(o.default)
    kw = {"help": f"{o.help} (default: {dflt})", "default": argparse.SUPPRESS, "dest": o.name}
    if o.kind == "bool":
        kw["action"] = argparse.BooleanOptionalAction
    elif o.kind in ("vec3", "floats", "ints"):
        kw["nargs"] = 3 if o.kind == "vec3" else "*"
        kw["type"] = int if o.kind == "ints" else float
        kw["metavar"] = "X"
    elif o.kind == "choice":
        kw["choices"] = o.choices
    else:
        kw["type"] = {"float": float, "nfloat": _none_or(float), "int": int, "nint": _none_or(int),
                      "str": str, "nstr": _none_or(str)}[o.kind]
    if o.positional:
        kw.pop("dest")
        parser.add_argument(o.name, nargs="?", **kw)
        return
    flags = [f"--{o.name.replace('_', '-')}"] + ([o.short] if o.short else [])
    parser.add_argument(*flags, **kw)


def _resolve(opts, args: dict, name: str) -> dict:
    schema = {"type": "object", "additionalProperties": False,
              "properties": {o.name: _opt_schema(o) for o in opts}}
    cfg = {}
    if args.get("config"):
        from .io import load_json

        cfg = load_json(args["config"])
        try:
            jsonschema.validate(cfg, schema)
        except jsonschema.ValidationError as e:
            loc = "/".join(str(p) for p in e.absolute_path) or "<root>"
            raise UsageError(f"config for {name!r} invalid at {loc}: {e.message}") from None
    out = {}
    for o in opts:
        if o.name in args:
            out[o.name] = args[o.name]
        elif o.name in cfg:
            out[o.name] = cfg[o.name]
        elif o.required:
            raise UsageError(f"{name}: missing required parameter {o.name!r}")
        else:
            out[o.name] = o.default
    return out


# ---------------------------------------------------------------- helpers

def _pose(v):
    from .geometry import Pose

    return None if v is None else Pose(np.asarray(v, float))


def _pmap(fn, items, threads):
    """Ordered map, in worker processes when ``threads`` > 1."""
    items = list(items)
    if threads <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def _samples(data_dir):
    from .estimate import TrainSample
    from .io import FormatError, read_rir_set

    out = []
    for rir, meta in read_rir_set(data_dir):
        if "pose_tx" not in meta or "pose_rx" not in meta:
            raise FormatError(f"{data_dir}: entry {meta.get('wav')} lacks pose_tx / pose_rx")
        out.append(TrainSample(meta["pose_tx"], meta["pose_rx"], rir))
    if not out:
        raise FormatError(f"{data_dir}: no RIRs found")
    return out


def _render_one(scene, params, max_bounces, length, absolute, poses):
    from .raytrace import render_rir

    tx, rx = poses
    return render_rir(scene, tx, rx, params=params, max_bounces=max_bounces, length=length,
                      onset=0.0 if absolute else None)


# ---------------------------------------------------------------- subcommands

def cmd_chirp(cfg, threads):
    from .io import write_wav
    from .signals import ChirpSpec, gen_chirp

    w = gen_chirp(ChirpSpec(cfg["f0"], cfg["f1"], cfg["dur"], cfg["amplitude"]),
                  cfg["sample_rate"], cfg["fade"])
    write_wav(cfg["output"], w)
    log.info("wrote %d samples to %s", len(w), cfg["output"])


_VEC = {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3}
_TRAJ = {"type": "object", "additionalProperties": False, "properties": {
    "position": _VEC,
    "line": {"type": "object", "additionalProperties": False, "required": ["start", "end"],
             "properties": {"start": _VEC, "end": _VEC, "t_start": {"type": "number"},
                            "t_end": {"type": "number"}}},
    "walk": {"type": "object", "additionalProperties": False, "required": ["lo", "hi", "duration"],
             "properties": {"lo": _VEC, "hi": _VEC, "speed": {"type": "number", "exclusiveMinimum": 0},
                            "duration": {"type": "number", "exclusiveMinimum": 0},
                            "seed": {"type": "integer"}, "step": {"type": "number",
                                                                  "exclusiveMinimum": 0}}}},
    "minProperties": 1, "maxProperties": 1}
_CLOCK = {"type": "object", "additionalProperties": False,
          "properties": {"offset": {"type": "number"}, "drift": {"type": "number"}}}
_CHIRP = {"type": "object", "additionalProperties": False, "required": ["f_start", "f_end", "duration"],
          "properties": {"f_start": {"type": "number"}, "f_end": {"type": "number"},
                         "duration": {"type": "number"}, "amplitude": {"type": "number"}}}

SESSION_SCHEMA = {
    "type": "object", "additionalProperties": False, "required": ["tx", "rx"],
    "properties": {
        "tx": _TRAJ, "rx": _TRAJ,
        "n_exchanges": {"type": ["integer", "null"], "minimum": 0},
        "interval": {"type": "number", "exclusiveMinimum": 0},
        "latency": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
        "snr_db": {"type": ["number", "null"]},
        "start": {"type": "number", "minimum": 0},
        "max_bounces": {"type": "integer", "minimum": 0},
        "tail": {"type": "number", "minimum": 0},
        "sample_rate": {"type": "number", "exclusiveMinimum": 0},
        "seed": {"type": "integer"},
        "clock_rx": _CLOCK, "clock_tx": _CLOCK,
        "c1": _CHIRP, "c2": _CHIRP,
    },
}


def _trajectory(d):
    from .handshake import Trajectory

    if "position" in d:
        return Trajectory.static(np.asarray(d["position"], float))
    if "line" in d:
        ln = d["line"]
        return Trajectory.line(ln["start"], ln["end"], ln.get("t_start", 0.0), ln.get("t_end", 1.0))
    w = d["walk"]
    return Trajectory.walk(w["lo"], w["hi"], w.get("speed", 1.0), w["duration"], w.get("seed", 0),
                           w.get("step", 1.0))


def _chirp_dict(c):
    return {"f_start": c.f_start, "f_end": c.f_end, "duration": c.duration, "amplitude": c.amplitude}


def cmd_simulate(cfg, threads):
    from .handshake import ClockModel, SessionConfig, simulate_session
    from .io import load_json, load_scene, validate, write_jsonl, write_wav
    from .signals import ChirpSpec

    scene = load_scene(cfg["scene"])
    doc = load_json(cfg["session"])
    validate(doc, SESSION_SCHEMA, "session")
    kw = {k: doc[k] for k in ("n_exchanges", "interval", "snr_db", "start", "max_bounces", "tail",
                              "sample_rate", "seed") if k in doc}
    if "latency" in doc:
        kw["latency"] = tuple(doc["latency"])
    for k in ("c1", "c2"):
        if k in doc:
            kw[k] = ChirpSpec(**doc[k])
    if cfg["seed"] is not None:
        kw["seed"] = cfg["seed"]
    sc = SessionConfig(_trajectory(doc["tx"]), _trajectory(doc["rx"]), **kw)
    res = simulate_session(scene, sc, ClockModel(**doc.get("clock_rx", {})),
                           ClockModel(**doc.get("clock_tx", {})))
    out = Path(cfg["output"])
    out.mkdir(parents=True, exist_ok=True)
    write_wav(out / "rx.wav", res.rx.audio)
    write_wav(out / "tx.wav", res.tx.audio)
    meta = {"sample_rate": sc.sample_rate, "interval": sc.interval,
            "rx": {"wav": "rx.wav", "t0": res.rx.audio.t0, "emissions": res.rx.emissions.tolist(),
                   "probe": _chirp_dict(sc.c1)},
            "tx": {"wav": "tx.wav", "t0": res.tx.audio.t0, "emissions": res.tx.emissions.tolist(),
                   "probe": _chirp_dict(sc.c2)}}
    (out / "session.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    write_jsonl(out / "truth.jsonl", [t.to_dict() for t in res.truth])
    log.info("simulated %d exchanges into %s", len(res.truth), out)


def cmd_handshake(cfg, threads):
    from .geometry import Pose
    from .handshake import DetectorConfig, DeviceRecording, run_protocol
    from .io import FormatError, load_json, read_jsonl, read_wav, write_rir_set
    from .signals import ChirpSpec, Waveform

    src = Path(cfg["input"])
    meta = load_json(src / "session.json")
    devs = {}
    try:
        for k in ("rx", "tx"):
            m = meta[k]
            w = read_wav(src / m["wav"])
            devs[k] = DeviceRecording(Waveform(w.samples, w.sample_rate, m["t0"]),
                                      np.asarray(m["emissions"], float), ChirpSpec(**m["probe"]))
    except (KeyError, TypeError) as e:
        raise FormatError(f"{src / 'session.json'}: malformed session metadata ({e})") from e
    interval = cfg["interval"] if cfg["interval"] is not None else meta.get("interval", 2.0)
    det = DetectorConfig(threshold=cfg["threshold"], decimation=cfg["decimation"], h_min=cfg["h_min"],
                         delta_t=cfg["delta_t"], growth_a=cfg["growth_a"], search=cfg["search"],
                         h_rel=cfg["h_rel"], rir_length=cfg["rir_length"], interval=interval)
    res = run_protocol(devs["rx"], devs["tx"], devs["rx"].probe, devs["tx"].probe, det)
    truth = {}
    if (src / "truth.jsonl").exists():
        truth = {t["index"]: t for t in read_jsonl(src / "truth.jsonl")}
    entries = []
    for (rec, rir), idx in zip(res.exchanges, res.indices):
        e = {"rir": rir, "wav": f"rir_{idx:04d}.wav", "index": idx, **rec.to_dict(),
             "tof": rir.onset}
        if idx in truth:
            t = truth[idx]
            e.update(tof_true=t["tof"], pose_tx=Pose.from_dict(t["pose_tx"]),
                     pose_rx=Pose.from_dict(t["pose_rx"]))
        entries.append(e)
    out = Path(cfg["output"])
    write_rir_set(out, entries)
    (out / "report.json").write_text(json.dumps(res.report, indent=1, sort_keys=True) + "\n")
    log.info("paired %d of %d exchanges", res.report["paired"], res.report["emitted"])


def cmd_extract(cfg, threads):
    from .io import read_wav, write_wav
    from .signals import extract_rir

    rec = read_wav(cfg["received"], cfg["received_t0"])
    probe = read_wav(cfg["chirp"], cfg["chirp_t0"])
    rir = extract_rir(rec, probe, cfg["arrival"], cfg["tof"], cfg["length"])
    write_wav(cfg["output"], rir)
    print(json.dumps({"onset": rir.onset, "taps": len(rir)}, sort_keys=True))


def cmd_render(cfg, threads):
    from .estimate import EstimateParams
    from .field import FieldModel, render_field
    from .io import load_json, load_scene, read_rir_set, write_rir_set, write_wav

    scene = load_scene(cfg["scene"])
    params = None
    if cfg["params"]:
        params = EstimateParams.from_json(Path(cfg["params"]).read_text())
    model = None
    if cfg["field"]:
        model = FieldModel.from_bytes(Path(cfg["field"]).read_bytes(), scene)
    tx = _pose(cfg["tx"])
    if cfg["poses"]:
        p = Path(cfg["poses"])
        if p.is_dir():
            jobs = [(m.get("pose_tx", tx), m.get("pose_rx"), m["wav"]) for _, m in read_rir_set(p)]
        else:
            jobs = [(tx, _pose(q), f"rir_{i:04d}.wav") for i, q in enumerate(load_json(p))]
    else:
        jobs = [(tx, _pose(cfg["rx"]), None)]
    for t, r, _ in jobs:
        if r is None or (t is None and model is None):
            raise UsageError("render needs a transmitter (--tx) and receiver (--rx / --poses)")
    if model is not None:
        rirs = [render_field(model, r) for _, r, _ in jobs]
    else:
        fn = partial(_render_one, scene, params, cfg["max_bounces"], cfg["length"], cfg["absolute"])
        rirs = _pmap(fn, [(t, r) for t, r, _ in jobs], threads)
    if cfg["poses"]:
        write_rir_set(cfg["output"], [{"rir": h, "wav": n, "pose_tx": t if t is not None else model.pose_tx,
                                       "pose_rx": r} for h, (t, r, n) in zip(rirs, jobs)])
    else:
        write_wav(cfg["output"], rirs[0])
        print(json.dumps({"onset": rirs[0].onset, "taps": len(rirs[0])}, sort_keys=True))


def cmd_fit_materials(cfg, threads):
    from .estimate import EstimateParams, FitConfig, fit_materials
    from .io import load_scene

    scene = load_scene(cfg["scene"])
    samples = _samples(cfg["data"])
    fc = FitConfig(lr=cfg["lr"], iterations=cfg["iterations"], patience=cfg["patience"],
                   seed=cfg["seed"], max_bounces=cfg["max_bounces"], band=tuple(cfg["band"]),
                   gate=cfg["gate"], fit_gains=cfg["fit_gains"])
    init = EstimateParams.initial(scene.n_segments, cfg["degree"], cfg["r0"])
    res = fit_materials(scene, samples, fc, init)
    Path(cfg["output"]).write_text(res.params.to_json() + "\n")
    summary = {"iterations": res.iterations, "loss_initial": res.trace[0] if res.trace else None,
               "loss_final": res.best_trace[-1] if res.best_trace else None,
               "reflectance_mean": res.params.reflectance().mean(axis=1).tolist()}
    print(json.dumps(summary, sort_keys=True))


def cmd_fit_field(cfg, threads):
    from .field import FieldConfig, fit_field
    from .io import load_scene

    scene = load_scene(cfg["scene"])
    samples = _samples(cfg["data"])
    fc = FieldConfig(n_patches=cfg["n_patches"], n_rays=cfg["n_rays"], iterations=cfg["iterations"],
                     batch=cfg["batch"], lr=cfg["lr"], lr_final=cfg["lr_final"],
                     gain_lr=cfg["gain_lr"], init_scale=cfg["init_scale"],
                     weight_decay=cfg["weight_decay"], fit_gain=cfg["fit_gain"], seed=cfg["seed"],
                     w_stft=cfg["w_stft"], w_env=cfg["w_env"])
    fit = fit_field(scene, samples, fc)
    Path(cfg["output"]).write_bytes(fit.model.to_bytes())
    print(json.dumps({"loss_initial": fit.trace[0], "loss_final": fit.trace[-1],
                      "iterations": len(fit.trace)}, sort_keys=True))


def cmd_metrics(cfg, threads):
    from .io import FormatError, read_rir_set
    from .metrics import compare, report_csv

    a, b = read_rir_set(cfg["a"]), read_rir_set(cfg["b"])
    if len(a) != len(b):
        raise FormatError(f"RIR sets differ in size: {len(a)} vs {len(b)}")
    if not a:
        raise FormatError("no RIRs to compare")
    rows = [compare(x, y) for (x, _), (y, _) in zip(a, b)]
    text = report_csv(rows, [m["wav"] for _, m in a])
    if cfg["output"]:
        Path(cfg["output"]).write_text(text)
    else:
        sys.stdout.write(text)


_BANDS = {"oneOf": [{"type": "number", "minimum": 0, "maximum": 1},
                    {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1},
                     "minItems": 7, "maxItems": 7}]}
EDITS_SCHEMA = {"type": "array", "items": {"oneOf": [
    {"type": "object", "additionalProperties": False, "required": ["kind", "segments", "material"],
     "properties": {"kind": {"const": "set_material"},
                    "segments": {"oneOf": [{"const": "all"}, {"type": "integer", "minimum": 0},
                                           {"type": "array", "items": {"type": "integer",
                                                                       "minimum": 0}}]},
                    "material": {"type": "string"}, "bands": _BANDS}},
    {"type": "object", "additionalProperties": False, "required": ["kind", "material"],
     "properties": {"kind": {"const": "insert_mesh"}, "mesh": {"type": "string"},
                    "box": {"type": "object", "additionalProperties": False, "required": ["lo", "hi"],
                            "properties": {"lo": _VEC, "hi": _VEC, "color": _VEC}},
                    "material": {"type": "string"}, "bands": _BANDS,
                    "color_tol": {"type": "number"}, "normal_tol": {"type": "number"}},
     "oneOf": [{"required": ["mesh"]}, {"required": ["box"]}]},
    {"type": "object", "additionalProperties": False, "required": ["kind", "segment"],
     "properties": {"kind": {"const": "remove_segment"}, "segment": {"type": "integer", "minimum": 0}}},
    {"type": "object", "additionalProperties": False, "required": ["kind", "segment"],
     "properties": {"kind": {"const": "move_segment"}, "segment": {"type": "integer", "minimum": 0},
                    "translation": _VEC, "axis": _VEC, "angle": {"type": "number"}}},
]}}


def _edit_op(d, base):
    from .geometry import box_mesh
    from .io import read_ply
    from .twin import EditOp

    k = d["kind"]
    if k == "set_material":
        return EditOp.set_material(d["segments"], d["material"], d.get("bands"))
    if k == "insert_mesh":
        if "mesh" in d:
            mesh = read_ply(Path(base) / d["mesh"])
        else:
            bx = d["box"]
            mesh = box_mesh(bx["lo"], bx["hi"], inward=False,
                            colors=np.asarray(bx.get("color", (0.5, 0.5, 0.5)), float))
        extra = {x: d[x] for x in ("color_tol", "normal_tol") if x in d}
        return EditOp.insert_mesh(mesh, d["material"], d.get("bands"), **extra)
    if k == "remove_segment":
        return EditOp.remove_segment(d["segment"])
    return EditOp.move_segment(d["segment"], d.get("translation", (0, 0, 0)), d.get("axis", (0, 0, 1)),
                               d.get("angle", 0.0))


def cmd_edit(cfg, threads):
    from .io import load_json, load_scene, save_scene, validate
    from .twin import apply_edits

    scene = load_scene(cfg["scene"])
    doc = load_json(cfg["ops"])
    validate(doc, EDITS_SCHEMA, "edit list")
    ops = [_edit_op(d, Path(cfg["ops"]).parent) for d in doc]
    edited = apply_edits(scene, ops)
    save_scene(edited, cfg["output"])
    print(json.dumps({"segments": edited.n_segments,
                      "faces": edited.mesh.n_faces if edited.mesh is not None else 0}, sort_keys=True))


def _featurize_at(renderer, pos):
    from .twin import featurize

    return featurize(renderer(_pose(pos)))


def cmd_localize(cfg, threads):
    from .field import FieldModel
    from .io import FormatError, load_scene, read_rir_set, write_jsonl
    from .twin import (RirDatabase, field_renderer, grid_positions, localize, raytrace_renderer)

    scene = load_scene(cfg["scene"])
    measured = read_rir_set(cfg["measured"])
    if any("pose_rx" not in m for _, m in measured):
        raise FormatError(f"{cfg['measured']}: every measured RIR needs pose_rx")
    tx = _pose(cfg["tx"])
    if tx is None and measured and "pose_tx" in measured[0][1]:
        tx = measured[0][1]["pose_tx"]
    db = RirDatabase.build([m["pose_rx"].position for _, m in measured], [r for r, _ in measured],
                           "measured", tx)
    if cfg["augment"]:
        if len(cfg["augment"]) != 3:
            raise UsageError("--augment takes three grid counts (nx ny nz)")
        if scene.mesh is None:
            raise UsageError("augmentation needs a bounded scene")
        lo, hi = scene.mesh.bounds
        m = cfg["margin"]
        pos = grid_positions(lo + m, hi - m, cfg["augment"])
        if cfg["renderer"] == "field":
            if not cfg["field"]:
                raise UsageError("--renderer field needs --field MODEL")
            rend = field_renderer(FieldModel.from_bytes(Path(cfg["field"]).read_bytes(), scene))
        else:
            if tx is None:
                raise UsageError("raytrace augmentation needs --tx")
            rend = raytrace_renderer(scene, tx, max_bounces=cfg["max_bounces"], length=cfg["length"])
        feats = _pmap(partial(_featurize_at, rend), [p.tolist() for p in pos], threads)
        db = db.extended(pos, np.array(feats), "synthesized")
    if cfg["db"]:
        Path(cfg["db"]).write_bytes(db.to_bytes())
    rows, errs = [], []
    for rir, meta in read_rir_set(cfg["queries"]):
        est = localize(db, rir, cfg["k"], cfg["eps"])
        row = {"wav": meta["wav"], "estimate": est.tolist()}
        if "pose_rx" in meta:
            e = float(np.linalg.norm(est - meta["pose_rx"].position))
            row["truth"] = meta["pose_rx"].position.tolist()
            row["error"] = e
            errs.append(e)
        rows.append(row)
    write_jsonl(cfg["output"], rows)
    print(json.dumps({"database": len(db), "queries": len(rows),
                      "median_error": float(np.median(errs)) if errs else None}, sort_keys=True))


def cmd_bench(cfg, threads):
    from . import bench

    rows = bench.run(cfg["repeats"], cfg["scale"])
    if cfg["output"]:
        Path(cfg["output"]).write_text(json.dumps(rows, indent=1) + "\n")
    print(bench.format_table(rows))


# ---------------------------------------------------------------- parser

_OUT = Opt("output", "str", None, "output path", required=True, short="-o")
_SCENE = Opt("scene", "str", None, "scene JSON", required=True)

COMMANDS = {
    "chirp": (cmd_chirp, "write a linear FM probe chirp as a WAV file", [
        Opt("f0", "float", 11000.0, "start frequency [Hz]"),
        Opt("f1", "float", 19000.0, "end frequency [Hz]"),
        Opt("dur", "float", 0.2, "duration [s]"),
        Opt("amplitude", "float", 1.0, "peak amplitude"),
        Opt("sample_rate", "float", 48000.0, "sample rate [Hz]"),
        Opt("fade", "float", 0.005, "raised-cosine taper at each end [s]"),
        _OUT]),
    "simulate": (cmd_simulate, "synthesize both device recordings of a handshake session", [
        _SCENE,
        Opt("session", "str", None, "session JSON (trajectories, clocks, noise, timing)", required=True),
        Opt("seed", "nint", None, "override the session seed"),
        _OUT]),
    "handshake": (cmd_handshake, "detect, pair and extract RIRs from a simulated session directory", [
        Opt("input", "str", None, "session directory written by 'simulate'", required=True,
            positional=True),
        Opt("threshold", "float", 0.3, "streaming detector correlation threshold"),
        Opt("decimation", "int", 8, "detector decimation factor"),
        Opt("h_min", "nfloat", None, "arrival-picking floor (null: max of 5x median and h_rel x peak)"),
        Opt("h_rel", "float", 0.15, "arrival-picking floor relative to the window peak"),
        Opt("delta_t", "float", 0.002, "arrival-picking isolation window [s]"),
        Opt("growth_a", "float", 2.0, "arrival-picking strength ratio"),
        Opt("search", "float", 0.02, "refinement window either side of a detection [s]"),
        Opt("rir_length", "float", 0.3, "extracted RIR length [s]"),
        Opt("interval", "nfloat", None, "emission period [s] (null: from session.json)"),
        _OUT]),
    "extract": (cmd_extract, "matched-filter RIR extraction from one recording", [
        Opt("received", "str", None, "received WAV", required=True),
        Opt("chirp", "str", None, "probe chirp WAV", required=True),
        Opt("arrival", "float", None, "direct-path arrival time in the received clock [s]",
            required=True),
        Opt("tof", "nfloat", None, "time of flight used as RIR onset [s]"),
        Opt("received_t0", "float", 0.0, "time of the first received sample [s]"),
        Opt("chirp_t0", "float", 0.0, "emission time of the probe in the received clock [s]"),
        Opt("length", "float", 0.3, "RIR length [s]"),
        _OUT]),
    "render": (cmd_render, "render RIRs with the ray tracer or a fitted field model", [
        _SCENE,
        Opt("tx", "vec3", None, "transmitter position [m]"),
        Opt("rx", "vec3", None, "receiver position [m]"),
        Opt("poses", "nstr", None, "RIR-set directory (render at its poses) or JSON list of Rx positions"),
        Opt("params", "nstr", None, "fitted material parameters JSON"),
        Opt("field", "nstr", None, "fitted field model file (overrides the ray tracer)"),
        Opt("max_bounces", "int", 8, "maximum reflection order"),
        Opt("length", "float", 0.3, "RIR length [s]"),
        Opt("absolute", "bool", False, "tap 0 at time zero instead of the direct path"),
        _OUT]),
    "fit-materials": (cmd_fit_materials, "estimate per-segment reflection spectra from measured RIRs", [
        _SCENE,
        Opt("data", "str", None, "RIR-set directory with pose_tx / pose_rx", required=True),
        Opt("lr", "float", 0.02, "Adam step size"),
        Opt("iterations", "int", 2000, "maximum iterations"),
        Opt("patience", "int", 200, "stop after this many iterations without improvement"),
        Opt("seed", "int", 0, "random seed"),
        Opt("max_bounces", "int", 3, "reflection order of the fitted model"),
        Opt("band", "floats", [50.0, 9000.0], "frequency band of the loss [Hz]"),
        Opt("gate", "nfloat", None, "time gate on the loss [s]"),
        Opt("fit_gains", "bool", True, "also fit the Tx/Rx gain patterns"),
        Opt("degree", "int", 2, "spherical-harmonic degree of the gain patterns"),
        Opt("r0", "float", 0.5, "initial reflection amplitude"),
        _OUT]),
    "fit-field": (cmd_fit_field, "fit surface-patch emissions to RIRs around a fixed transmitter", [
        _SCENE,
        Opt("data", "str", None, "RIR-set directory with pose_tx / pose_rx", required=True),
        Opt("n_patches", "int", 256, "number of surface patches"),
        Opt("n_rays", "int", 512, "rays per render"),
        Opt("iterations", "int", 300, "training iterations"),
        Opt("batch", "int", 16, "minibatch size"),
        Opt("lr", "float", 0.05, "Adam step relative to the emission scale"),
        Opt("lr_final", "float", 0.0, "final step after cosine decay"),
        Opt("gain_lr", "float", 0.5, "step multiplier for the Rx gain coefficients"),
        Opt("init_scale", "float", 0.1, "random initial emission amplitude"),
        Opt("weight_decay", "float", 0.05, "decoupled emission decay per unit step"),
        Opt("fit_gain", "bool", True, "fit the Rx gain pattern"),
        Opt("seed", "int", 0, "random seed"),
        Opt("w_stft", "float", 1.0, "multi-scale STFT loss weight"),
        Opt("w_env", "float", 0.5, "envelope loss weight"),
        _OUT]),
    "metrics": (cmd_metrics, "compare two RIRs or RIR-set directories pairwise", [
        Opt("a", "str", None, "first RIR or directory", required=True),
        Opt("b", "str", None, "second RIR or directory", required=True),
        Opt("output", "nstr", None, "CSV report path (null: stdout)", short="-o")]),
    "edit": (cmd_edit, "apply material / geometry edits to a scene", [
        _SCENE,
        Opt("ops", "str", None, "JSON list of edit operations", required=True),
        _OUT]),
    "localize": (cmd_localize, "nearest-neighbour localization, optionally with synthesized entries", [
        _SCENE,
        Opt("measured", "str", None, "RIR-set directory with pose_rx (database)", required=True),
        Opt("queries", "str", None, "RIR-set directory to localize", required=True),
        Opt("tx", "vec3", None, "transmitter position (null: from the measured set)"),
        Opt("augment", "ints", [], "synthesized grid counts nx ny nz (empty: none)"),
        Opt("margin", "float", 0.3, "grid clearance from the scene bounds [m]"),
        Opt("renderer", "choice", "raytrace", "augmentation renderer", choices=("raytrace", "field")),
        Opt("field", "nstr", None, "field model for --renderer field"),
        Opt("max_bounces", "int", 8, "ray-tracer reflection order"),
        Opt("length", "float", 0.3, "ray-tracer RIR length [s]"),
        Opt("k", "int", 5, "neighbours"),
        Opt("eps", "float", 1e-6, "inverse-distance regularizer"),
        Opt("db", "nstr", None, "also write the database here"),
        _OUT]),
    "bench": (cmd_bench, "time the hot kernels under numba and numpy", [
        Opt("repeats", "int", 3, "best-of repeats"),
        Opt("scale", "float", 1.0, "workload size factor"),
        Opt("output", "nstr", None, "JSON results path", short="-o")]),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="avtwin", description="Acoustic digital-twin toolkit.")
    p.add_argument("--version", action="version", version=f"avtwin {__version__} ({BACKEND})")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", required=True)
    for name, (_, desc, opts) in COMMANDS.items():
        sp = sub.add_parser(name, help=desc, description=desc)
        sp.add_argument("--config", default=None, help="JSON file with parameters (flags override it)")
        sp.add_argument("--threads", type=int, default=None,
                        help=f"worker processes (default: available cores = {os.cpu_count() or 1})")
        sp.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
        for o in opts:
            _add(sp, o)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as e:  # --help, --version and argparse usage errors
        return int(e.code or 0)
    args = vars(ns)
    logging.basicConfig(level=logging.INFO if args.pop("verbose") else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    name = args.pop("command")
    fn, _, opts = COMMANDS[name]
    threads = args.pop("threads") or os.cpu_count() or 1
    from .io import FormatError

    try:
        cfg = _resolve(opts, args, name)
        print(json.dumps({"command": name, **cfg}, sort_keys=True))
        sys.stdout.flush()
        fn(cfg, threads)
    except UsageError as e:
        print(f"avtwin {name}: error: {e}", file=sys.stderr)
        return 2
    except (FormatError, OSError, ValueError, RuntimeError, KeyError) as e:
        print(f"avtwin {name}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
