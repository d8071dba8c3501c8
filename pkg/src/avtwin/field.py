"""Surface-emitter acoustic field rendered by first-hit ray casting.

Mesh faces are grouped into patches; each patch owns an emission waveform.
A render casts a fixed set of directions from the receiver, looks up the
patch at each first hit and adds that patch's waveform, delayed by the hit
distance, weighted by the receiver gain and divided by the travelled
distance at each output tap. The output is on an absolute time axis (tap 0
is the emission instant at the fixed transmitter).
"""
from __future__ import annotations

import io
import json
import logging
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import kernels
from .geometry import Pose, Scene, cast_rays, sphere_directions
from .metrics import STFT_WINDOWS, _frame_layout, hann, stft_frames
from .raytrace import SH_DEGREE, GainPattern, isotropic_coeffs, real_sh, softplus
from .signals import RIR_LENGTH, SAMPLE_RATE, Rir

log = logging.getLogger(__name__)

N_PATCHES = 256
N_RAYS = 512
STFT_WEIGHT = 1.0
ENV_WEIGHT = 0.5
FORMAT_VERSION = 1
_MAGIC = b"AVTFIELD"


class FieldError(ValueError):
    pass


def cluster_patches(scene: Scene, n_patches: int = N_PATCHES) -> np.ndarray:
    """Area-balanced patch id per face, by recursive median-area bisection.

    Each cell is split across its widest centroid axis at the point where the
    cumulative face area matches the share of patches sent to each side.
    """
    mesh = scene.mesh
    nf = mesh.n_faces if mesh is not None else 0
    out = np.zeros(nf, dtype=np.int64)
    if nf == 0:
        return out
    cen, area = mesh.centroids, mesh.areas
    next_id = 0
    stack = [(np.arange(nf), min(int(n_patches), nf))]
    while stack:
        faces, k = stack.pop()
        if k <= 1 or len(faces) <= 1:
            out[faces] = next_id
            next_id += 1
            continue
        c = cen[faces]
        ax = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        order = faces[np.lexsort((faces, c[:, ax]))]
        k_left = k // 2
        cum = np.cumsum(area[order])
        cut = int(np.searchsorted(cum, cum[-1] * k_left / k))
        cut = int(np.clip(cut, k_left, len(order) - (k - k_left)))
        # push right first so ids grow in left-to-right order
        stack.append((order[cut:], k - k_left))
        stack.append((order[:cut], k_left))
    return out


@dataclass(frozen=True)
class RayHits:
    patch: np.ndarray  # (K,) patch id, -1 on a miss
    shift: np.ndarray  # (K,) whole-sample delay
    alpha: np.ndarray  # (K,) fractional part of the delay
    sh: np.ndarray  # (K, n_sh) receiver-frame SH rows

    @property
    def n_hits(self) -> int:
        return int(np.count_nonzero(self.patch >= 0))


@dataclass
class RenderStats:
    n_rays: int
    n_hits: int
    emitter_evals: int


@dataclass(eq=False)
class FieldModel:
    scene: Scene
    patch_of_face: np.ndarray
    emissions: np.ndarray  # (P, T)
    pose_tx: Pose
    n_rays: int = N_RAYS
    sample_rate: float = SAMPLE_RATE
    rx_coeffs: np.ndarray = field(default_factory=isotropic_coeffs)

    def __post_init__(self):
        self.patch_of_face = np.asarray(self.patch_of_face, dtype=np.int64)
        self.emissions = np.ascontiguousarray(self.emissions, dtype=float)
        self.rx_coeffs = np.asarray(self.rx_coeffs, float)
        nf = self.scene.mesh.n_faces if self.scene.mesh is not None else 0
        if len(self.patch_of_face) != nf:
            raise FieldError("patch map must cover every mesh face")
        if nf and (self.patch_of_face.min() < 0 or self.patch_of_face.max() >= self.n_patches):
            raise FieldError("patch ids out of range")
        if not np.all(np.isfinite(self.emissions)):
            raise FieldError("emission waveforms must be finite")

    @classmethod
    def empty(cls, scene, pose_tx, n_patches=N_PATCHES, n_taps=None, n_rays=N_RAYS,
              sample_rate=SAMPLE_RATE):
        pm = cluster_patches(scene, n_patches)
        n_taps = int(round(RIR_LENGTH * sample_rate)) if n_taps is None else int(n_taps)
        p = int(pm.max()) + 1 if len(pm) else 0
        return cls(scene, pm, np.zeros((p, n_taps)), pose_tx, n_rays, sample_rate)

    @property
    def n_patches(self) -> int:
        return self.emissions.shape[0]

    @property
    def n_taps(self) -> int:
        return self.emissions.shape[1]

    @property
    def directions(self) -> np.ndarray:
        return sphere_directions(self.n_rays)

    def trace(self, pose_rx: Pose) -> RayHits:
        """First hits of the model's ray set from ``pose_rx`` (independent of emissions)."""
        if not self.scene.contains(pose_rx.position):
            raise FieldError(f"receiver {pose_rx.position} outside the scene")
        dirs = self.directions
        o = np.broadcast_to(pose_rx.position, dirs.shape)
        dist, face = cast_rays(self.scene.mesh, o, dirs)
        hit = face >= 0
        patch = np.where(hit, self.patch_of_face[np.where(hit, face, 0)], -1)
        delay = np.where(hit, dist, 0.0) / self.scene.speed_of_sound * self.sample_rate
        shift = np.floor(delay).astype(np.int64)
        sh = real_sh(pose_rx.to_local(dirs), int(np.sqrt(len(self.rx_coeffs))) - 1)
        return RayHits(patch.astype(np.int64), shift, delay - shift, sh)

    def inv_tc(self) -> np.ndarray:
        """1/(t c) per output tap; tap 0 uses half a sample to stay finite."""
        t = np.arange(self.n_taps, dtype=float)
        t[0] = 0.5
        return self.sample_rate / (t * self.scene.speed_of_sound)

    def ray_gains(self, hits: RayHits, coeffs=None) -> np.ndarray:
        c = self.rx_coeffs if coeffs is None else coeffs
        return softplus(hits.sh @ c) / self.n_rays

    def to_bytes(self) -> bytes:
        header = {
            "format": "avtwin-field", "version": FORMAT_VERSION,
            "n_patches": self.n_patches, "n_taps": self.n_taps, "n_rays": self.n_rays,
            "sample_rate": self.sample_rate, "speed_of_sound": self.scene.speed_of_sound,
            "n_faces": int(len(self.patch_of_face)), "patch_of_face": self.patch_of_face.tolist(),
            "pose_tx": self.pose_tx.to_dict(), "rx_sh": self.rx_coeffs.tolist(), "dtype": "<f8",
        }
        hb = json.dumps(header, sort_keys=True).encode()
        buf = io.BytesIO()
        buf.write(_MAGIC)
        buf.write(struct.pack("<I", len(hb)))
        buf.write(hb)
        buf.write(self.emissions.astype("<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes, scene: Scene) -> "FieldModel":
        if data[:len(_MAGIC)] != _MAGIC:
            raise FieldError("not a field model blob")
        n = struct.unpack("<I", data[len(_MAGIC):len(_MAGIC) + 4])[0]
        off = len(_MAGIC) + 4
        h = json.loads(data[off:off + n])
        if h.get("version") != FORMAT_VERSION:
            raise FieldError(f"unsupported field format version {h.get('version')}")
        nf = scene.mesh.n_faces if scene.mesh is not None else 0
        if h["n_faces"] != nf:
            raise FieldError("field model was built for a different mesh")
        em = np.frombuffer(data[off + n:], dtype="<f8").reshape(h["n_patches"], h["n_taps"])
        return cls(scene, np.array(h["patch_of_face"], dtype=np.int64), em.copy(),
                   Pose.from_dict(h["pose_tx"]), h["n_rays"], h["sample_rate"], np.array(h["rx_sh"]))


def _render(model: FieldModel, hits: RayHits, emissions=None, coeffs=None) -> np.ndarray:
    s = model.emissions if emissions is None else emissions
    return kernels.field_render(s, hits.patch, hits.shift, hits.alpha, model.ray_gains(hits, coeffs),
                                model.inv_tc())


def render_field(model: FieldModel, pose_rx: Pose, return_stats: bool = False):
    """RIR at ``pose_rx`` on an absolute time axis (onset 0)."""
    hits = model.trace(pose_rx)
    rir = Rir(_render(model, hits), model.sample_rate, 0.0)
    if return_stats:
        # the kernel reads exactly one emission row per ray that hits
        return rir, RenderStats(model.n_rays, hits.n_hits, hits.n_hits)
    return rir


# ---------------------------------------------------------------- loss

def _stft_loss_grad(x, y_mags, windows):
    """Sum over windows of mean | |STFT x| - |STFT y| | and its gradient w.r.t. x."""
    total = 0.0
    g = np.zeros_like(x)
    for win, ym in zip(windows, y_mags):
        fr = stft_frames(x, win)
        z = np.fft.rfft(fr, axis=1)
        mag = np.abs(z)
        diff = mag - ym
        total += float(np.mean(np.abs(diff)))
        sgn = np.sign(diff) / diff.size
        # d|z|/dz is z/|z|; at |z| = 0 the subgradient 0 is used
        u = np.zeros_like(z)
        nz = mag > 0
        u[nz] = sgn[nz] * np.conj(z[nz]) / mag[nz]
        full = np.zeros((len(z), win), dtype=complex)
        full[:, :u.shape[1]] = u
        gf = np.fft.fft(full, axis=1).real * hann(win)
        hop, pad, n_frames, length = _frame_layout(len(x), win)
        gp = np.zeros(length)
        # frames q apart never overlap, so each group is a plain scatter-add
        q = -(-win // hop)
        for r in range(q):
            starts = np.arange(r, n_frames, q) * hop
            idx = starts[:, None] + np.arange(win)[None, :]
            gp[idx.ravel()] += gf[r::q].ravel()
        g += gp[pad:pad + len(x)]
    return total, g


def _hilbert_mask(n):
    h = np.zeros(n)
    h[0] = 1.0
    if n % 2 == 0:
        h[n // 2] = 1.0
        h[1:n // 2] = 2.0
    else:
        h[1:(n + 1) // 2] = 2.0
    return h


def _env_loss_grad(x, y_env):
    n = len(x)
    mask = _hilbert_mask(n)
    a = np.fft.ifft(np.fft.fft(x) * mask)
    e = np.abs(a)
    diff = e - y_env
    loss = float(np.mean(np.abs(diff)))
    v = np.zeros(n, dtype=complex)
    nz = e > 0
    v[nz] = np.sign(diff[nz]) / n * a[nz] / e[nz]
    # the analytic-signal operator is self-adjoint
    g = np.fft.ifft(np.fft.fft(v) * mask).real
    return loss, g


@dataclass(frozen=True)
class _Target:
    mags: tuple
    env: np.ndarray


def _target(y, windows):
    from scipy.signal import hilbert
    return _Target(tuple(np.abs(np.fft.rfft(stft_frames(y, w), axis=1)) for w in windows),
                   np.abs(hilbert(y)))


def field_loss(x, y, windows=STFT_WINDOWS, w_stft=STFT_WEIGHT, w_env=ENV_WEIGHT,
               target: _Target | None = None):
    """Multi-scale STFT magnitude L1 plus envelope L1, with gradient w.r.t. ``x``."""
    target = target or _target(np.asarray(y, float), windows)
    ls, gs = _stft_loss_grad(x, target.mags, windows)
    le, ge = _env_loss_grad(x, target.env)
    return w_stft * ls + w_env * le, w_stft * gs + w_env * ge


# ---------------------------------------------------------------- training

@dataclass
class FieldConfig:
    n_patches: int = N_PATCHES
    n_rays: int = N_RAYS
    iterations: int = 300
    batch: int = 16
    lr: float = 0.05  # relative to the data-derived emission scale
    lr_final: float = 0.0
    gain_lr: float = 0.5  # multiplies lr for the gain coefficients
    init_scale: float = 0.1
    weight_decay: float = 0.05  # per unit of relative lr
    fit_gain: bool = True
    seed: int = 0
    windows: tuple = STFT_WINDOWS
    w_stft: float = STFT_WEIGHT
    w_env: float = ENV_WEIGHT


@dataclass
class FieldFit:
    model: FieldModel
    trace: list  # mean minibatch loss per iteration


def _emission_scale(model, hits, ys, rng) -> float:
    """RMS emission amplitude that makes renders match the targets' RMS level.

    Renders are linear in the emissions, so one probe with unit-variance
    random emissions fixes the ratio. Returns 1 for all-silent targets.
    """
    probe = rng.standard_normal(model.emissions.shape)
    num = den = 0.0
    for h, y in zip(hits, ys):
        x = kernels.field_render(probe, h.patch, h.shift, h.alpha, model.ray_gains(h), model.inv_tc())
        num += float(np.sum(y * y))
        den += float(np.sum(x * x))
    if num <= 0 or den <= 0:
        return 1.0
    return float(np.sqrt(num / den))


def fit_field(scene: Scene, samples, config: FieldConfig | None = None) -> FieldFit:
    """Fit patch emissions (and the Rx gain pattern) to RIRs measured around one Tx."""
    cfg = config or FieldConfig()
    samples = list(samples)
    if len(samples) < 1:
        raise FieldError("need at least one training sample")
    p0 = samples[0].pose_tx
    for s in samples:
        if not (np.allclose(s.pose_tx.position, p0.position, atol=1e-9)
                and np.allclose(s.pose_tx.orientation, p0.orientation, atol=1e-9)):
            raise FieldError("all samples must share one transmitter pose")
    fs = samples[0].measured.sample_rate
    n_taps = max(len(s.measured.absolute()) for s in samples)
    model = FieldModel.empty(scene, p0, cfg.n_patches, n_taps, cfg.n_rays, fs)
    targets, hits = [], []
    reach = np.zeros(model.n_patches, dtype=bool)
    for s in samples:
        y = s.measured.absolute(n_taps).taps
        targets.append(_target(y, cfg.windows))
        h = model.trace(s.pose_rx)
        hits.append(h)
        reach[h.patch[h.patch >= 0]] = True
    rng = np.random.default_rng(cfg.seed)
    scale = _emission_scale(model, hits, [s.measured.absolute(n_taps).taps
                                                         for s in samples[:8]], rng)
    em = rng.standard_normal(model.emissions.shape) * cfg.init_scale * scale
    em[~reach] = 0.0
    coeffs = model.rx_coeffs.copy()
    params = [em, coeffs]
    m1 = [np.zeros_like(p) for p in params]
    m2 = [np.zeros_like(p) for p in params]
    b1, b2, eps = 0.9, 0.999, 1e-12
    inv_tc = model.inv_tc()
    trace = []
    n = len(samples)
    for it in range(1, cfg.iterations + 1):
        batch = rng.choice(n, size=min(cfg.batch, n), replace=False) if cfg.batch < n else np.arange(n)
        g_em = np.zeros_like(em)
        g_c = np.zeros_like(coeffs)
        total = 0.0
        for b in batch:
            h = hits[b]
            a = h.sh @ coeffs
            gains = softplus(a) / model.n_rays
            x = kernels.field_render(em, h.patch, h.shift, h.alpha, gains, inv_tc)
            loss, gx = field_loss(x, None, cfg.windows, cfg.w_stft, cfg.w_env, targets[b])
            total += loss
            gs, gg = kernels.field_adjoint(gx, em, h.patch, h.shift, h.alpha, gains, inv_tc)
            g_em += gs
            if cfg.fit_gain:
                g_c += h.sh.T @ (gg * expit(a) / model.n_rays)
        total /= len(batch)
        g_em /= len(batch)
        g_c /= len(batch)
        if not np.isfinite(total):
            raise FieldError(f"non-finite field loss at iteration {it}")
        trace.append(total)
        lr = cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1 + np.cos(np.pi * (it - 1) / cfg.iterations))
        for p, g, mm, vv, step in zip(params, (g_em, g_c), m1, m2, (lr * scale, lr * cfg.gain_lr)):
            mm *= b1
            mm += (1 - b1) * g
            vv *= b2
            vv += (1 - b2) * g * g
            p -= step * (mm / (1 - b1 ** it)) / (np.sqrt(vv / (1 - b2 ** it)) + eps)
        # decoupled decay: emission components the data never constrains fade out
        em *= 1.0 - lr * cfg.weight_decay
        if cfg.fit_gain:
            coeffs[0] = model.rx_coeffs[0]  # degree-0 term fixed: overall scale lives in emissions
    model.emissions = em
    model.rx_coeffs = coeffs
    log.info("fit_field: %d iterations, final loss %.4g", len(trace), trace[-1])
    return FieldFit(model, trace)


def gain_pattern(model: FieldModel) -> GainPattern:
    return GainPattern(model.rx_coeffs)


__all__ = ["FieldModel", "FieldConfig", "FieldFit", "RenderStats", "cluster_patches", "render_field",
           "fit_field", "field_loss", "SH_DEGREE"]
