"""Material and gain-pattern inversion by gradient descent through the renderer.

Geometry is fixed during a fit, so every sample's path set, per-path delay
phasors and spherical-harmonic rows are computed once; an iteration only
re-evaluates reflection products and gains. The loss is the tap-wise mean
squared error between band-limited rendered and measured RIRs, and its
gradient is derived analytically (see ``MaterialFit.loss_and_grad``).
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logit

from .geometry import Pose, Scene
from .raytrace import (N_BANDS, SH_DEGREE, FrequencyGrid, GainPattern, PathTable, band_weights,
                       enumerate_paths, isotropic_coeffs, real_sh, softplus)
from .signals import Rir

log = logging.getLogger(__name__)

BAND_LIMITS = (50.0, 9000.0)


class EstimationError(RuntimeError):
    pass


@dataclass
class EstimateParams:
    """Raw learnable parameters: logits of band reflectances and SH gain coefficients."""

    raw_r: np.ndarray  # (S, 7); R = logistic(raw_r)
    tx: np.ndarray
    rx: np.ndarray

    def __post_init__(self):
        self.raw_r = np.asarray(self.raw_r, float).reshape(-1, N_BANDS)
        self.tx = np.asarray(self.tx, float).reshape(-1)
        self.rx = np.asarray(self.rx, float).reshape(-1)

    @classmethod
    def initial(cls, n_segments: int, degree: int = SH_DEGREE, r0: float = 0.5) -> "EstimateParams":
        return cls(np.full((n_segments, N_BANDS), logit(r0)), isotropic_coeffs(degree),
                   isotropic_coeffs(degree))

    @classmethod
    def from_reflectance(cls, refl, tx=None, rx=None, degree: int = SH_DEGREE):
        r = np.clip(np.asarray(refl, float), 1e-9, 1 - 1e-9)
        return cls(logit(r), isotropic_coeffs(degree) if tx is None else tx,
                   isotropic_coeffs(degree) if rx is None else rx)

    @property
    def n_segments(self) -> int:
        return self.raw_r.shape[0]

    def reflectance(self) -> np.ndarray:
        return expit(self.raw_r)

    def gains(self):
        return GainPattern(self.tx), GainPattern(self.rx)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.raw_r.ravel(), self.tx, self.rx])

    def with_vector(self, v) -> "EstimateParams":
        v = np.asarray(v, float)
        nr = self.raw_r.size
        nt = self.tx.size
        return EstimateParams(v[:nr].reshape(self.raw_r.shape), v[nr:nr + nt], v[nr + nt:])

    def to_json(self) -> str:
        return json.dumps({
            "segments": {str(i): r.tolist() for i, r in enumerate(self.reflectance())},
            "raw": self.raw_r.tolist(),
            "tx_sh": self.tx.tolist(),
            "rx_sh": self.rx.tolist(),
        }, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EstimateParams":
        d = json.loads(text)
        if "raw" in d:
            raw = np.asarray(d["raw"], float)
        else:
            keys = sorted(d["segments"], key=int)
            raw = logit(np.clip(np.array([d["segments"][k] for k in keys]), 1e-9, 1 - 1e-9))
        return cls(raw, d["tx_sh"], d["rx_sh"])


@dataclass(frozen=True)
class TrainSample:
    pose_tx: Pose
    pose_rx: Pose
    measured: Rir


def loss(rendered, measured) -> float:
    """Tap-wise mean squared error, averaged over a batch."""
    if isinstance(rendered, Rir):
        rendered, measured = [rendered], [measured]
    if len(rendered) != len(measured) or not rendered:
        raise ValueError("batch sizes differ or batch is empty")
    total = 0.0
    for a, b in zip(rendered, measured):
        if len(a) != len(b):
            raise ValueError(f"RIR lengths differ: {len(a)} vs {len(b)}")
        if a.sample_rate != b.sample_rate:
            raise ValueError("RIR sample rates differ")
        total += float(np.mean((a.taps - b.taps) ** 2))
    return total / len(rendered)


@dataclass
class _Cached:
    n_taps: int
    E: np.ndarray  # (P, B) delay phasors / d on in-band bins
    counts: np.ndarray  # (P, S)
    y_tx: np.ndarray  # (P, n_sh)
    y_rx: np.ndarray
    target: np.ndarray  # band-limited measured taps
    gate: np.ndarray  # (n_taps,) weights


class MaterialFit:
    """Loss and exact gradient of the band-limited RIR misfit for fixed geometry."""

    def __init__(self, scene: Scene, samples, grid: FrequencyGrid | None = None,
                 max_bounces: int = 3, band=BAND_LIMITS, gate: float | None = None,
                 degree: int = SH_DEGREE):
        samples = list(samples)
        if not samples:
            raise ValueError("need at least one training sample")
        fs = samples[0].measured.sample_rate
        n_max = max(len(s.measured) for s in samples)
        self.grid = grid or FrequencyGrid.for_length(n_max, fs)
        if self.grid.n_fft < n_max:
            raise ValueError("FFT size shorter than the measured RIRs")
        self.scene = scene
        self.n_segments = scene.n_segments
        self.degree = degree
        f = self.grid.freqs
        self.kb = np.nonzero((f >= band[0]) & (f <= band[1]))[0]
        fb = f[self.kb]
        self.W = band_weights(fb)
        self.mask = np.zeros(self.grid.n_bins)
        self.mask[self.kb] = 1.0
        c = scene.speed_of_sound
        self._cache = []
        for s in samples:
            if s.measured.sample_rate != self.grid.sample_rate:
                raise ValueError("measured sample rate does not match the grid")
            n = len(s.measured)
            paths = enumerate_paths(scene, s.pose_tx.position, s.pose_rx.position, max_bounces)
            t = PathTable.build(paths, self.n_segments)
            delays = t.length / c - s.measured.onset
            keep = (delays >= -0.5 / fs) & (delays < n / fs)
            E = np.exp(-2j * np.pi * np.outer(delays[keep], fb)) / t.length[keep, None]
            y_tx = real_sh(s.pose_tx.to_local(t.departure[keep]), degree) if keep.any() else \
                np.zeros((0, (degree + 1) ** 2))
            y_rx = real_sh(s.pose_rx.to_local(t.arrival[keep]), degree) if keep.any() else \
                np.zeros((0, (degree + 1) ** 2))
            spec = np.fft.rfft(s.measured.taps, self.grid.n_fft) * self.mask
            target = np.fft.irfft(spec, self.grid.n_fft)[:n]
            g = np.ones(n)
            if gate is not None:
                g[int(round(gate * fs)):] = 0.0
            self._cache.append(_Cached(n, E, t.counts[keep], y_tx, y_rx, target, g))
        self.samples = samples

    @property
    def n_params(self) -> int:
        return self.n_segments * N_BANDS + 2 * (self.degree + 1) ** 2

    def _split(self, v):
        ns = self.n_segments * N_BANDS
        nh = (self.degree + 1) ** 2
        return v[:ns].reshape(self.n_segments, N_BANDS), v[ns:ns + nh], v[ns + nh:ns + 2 * nh]

    def render(self, params: EstimateParams) -> list[Rir]:
        """Band-limited renders of every sample (same model the loss uses)."""
        out = []
        raw, ctx, crx = self._split(params.to_vector())
        rf = expit(raw) @ self.W
        for s, c in zip(self.samples, self._cache):
            h, *_ = self._forward(c, rf, ctx, crx)
            out.append(Rir(h, self.grid.sample_rate, s.measured.onset))
        return out

    def _forward(self, c, rf, ctx, crx):
        n_fft = self.grid.n_fft
        if len(c.E):
            pn = np.exp(c.counts @ np.log(rf))
            pe = pn * c.E
            a_tx = c.y_tx @ ctx
            a_rx = c.y_rx @ crx
            g_tx = softplus(a_tx)
            g_rx = softplus(a_rx)
            g = g_tx * g_rx
            hb = g @ pe
        else:
            pe = np.zeros((0, len(self.kb)), complex)
            a_tx = a_rx = g_tx = g_rx = g = np.zeros(0)
            hb = np.zeros(len(self.kb), complex)
        spec = np.zeros(self.grid.n_bins, complex)
        spec[self.kb] = hb
        h = np.fft.irfft(spec, n_fft)[:c.n_taps]
        return h, pe, a_tx, a_rx, g_tx, g_rx, g

    def loss(self, v) -> float:
        return self.loss_and_grad(v, need_grad=False)[0]

    def loss_and_grad(self, v, need_grad: bool = True):
        """Return (loss, gradient) for raw parameter vector ``v``.

        With ``G`` the derivative of the loss w.r.t. the real and imaginary
        parts of the rendered spectrum, each parameter's derivative is
        ``Re(conj(G) . dH/dtheta)`` summed over bins.
        """
        if isinstance(v, EstimateParams):
            v = v.to_vector()
        v = np.asarray(v, float)
        raw, ctx, crx = self._split(v)
        r = expit(raw)
        rf = r @ self.W
        m = len(self._cache)
        n_fft = self.grid.n_fft
        total = 0.0
        d_rf = np.zeros_like(rf)
        d_ctx = np.zeros_like(ctx)
        d_crx = np.zeros_like(crx)
        ck = np.full(self.grid.n_bins, 2.0)
        ck[0] = 1.0
        ck[-1] = 1.0
        for c in self._cache:
            h, pe, a_tx, a_rx, g_tx, g_rx, g = self._forward(c, rf, ctx, crx)
            res = c.gate * (h - c.target)
            total += float(np.mean(res * res))
            if not need_grad or len(pe) == 0:
                continue
            dh = np.zeros(n_fft)
            dh[:c.n_taps] = 2.0 * c.gate * res / (c.n_taps * m)
            G = (np.fft.rfft(dh) * ck / n_fft)[self.kb]
            V = (np.conj(G)[None, :] * pe).real
            dg = V.sum(axis=1)
            d_ctx += c.y_tx.T @ (dg * g_rx * expit(a_tx))
            d_crx += c.y_rx.T @ (dg * g_tx * expit(a_rx))
            d_rf += c.counts.T @ (g[:, None] * V)
        total /= m
        if not need_grad:
            return total, None
        d_r = (d_rf / rf) @ self.W.T
        d_raw = d_r * r * (1.0 - r)
        return total, np.concatenate([d_raw.ravel(), d_ctx, d_crx])


def grad(params: EstimateParams, batch, scene: Scene, grid: FrequencyGrid | None = None,
         **kwargs) -> np.ndarray:
    """Analytic gradient of the batch loss w.r.t. all raw parameters."""
    return MaterialFit(scene, batch, grid, **kwargs).loss_and_grad(params.to_vector())[1]


@dataclass
class FitConfig:
    lr: float = 0.02
    iterations: int = 2000
    patience: int = 200
    seed: int = 0
    max_bounces: int = 3
    band: tuple = BAND_LIMITS
    gate: float | None = None
    freeze_tx_gain0: bool = True
    fit_gains: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class FitResult:
    params: EstimateParams
    trace: list = field(default_factory=list)  # loss at every iteration
    best_trace: list = field(default_factory=list)  # running minimum
    iterations: int = 0


def adam_minimize(fun, x0, lr, iterations, patience, frozen=None, beta1=0.9, beta2=0.999,
                  eps=1e-8, callback=None):
    """Adam with best-so-far tracking and plateau stop. ``fun`` returns (loss, grad)."""
    x = np.array(x0, float)
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    best_x, best = x.copy(), np.inf
    trace, best_trace = [], []
    since = 0
    for it in range(1, iterations + 1):
        f, g = fun(x)
        if not np.isfinite(f) or not np.all(np.isfinite(g)):
            raise EstimationError(
                f"non-finite loss/gradient at iteration {it}: loss={f}, best={best:.6g}, "
                f"|x|max={np.abs(x).max():.3g}, lr={lr}")
        trace.append(float(f))
        if f < best:
            if f < best * (1 - 1e-9):
                since = 0
            else:
                since += 1
            best, best_x = float(f), x.copy()
        else:
            since += 1
        best_trace.append(best)
        if callback is not None:
            callback(it, f)
        if since >= patience:
            break
        if frozen is not None:
            g = np.where(frozen, 0.0, g)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mh = m / (1 - beta1 ** it)
        vh = v / (1 - beta2 ** it)
        x = x - lr * mh / (np.sqrt(vh) + eps)
    return best_x, trace, best_trace


def fit_materials(scene: Scene, samples, config: FitConfig | None = None,
                  init: EstimateParams | None = None, grid: FrequencyGrid | None = None) -> FitResult:
    """Adam descent from R = 0.5 and isotropic gains; returns the best-loss parameters."""
    config = config or FitConfig()
    samples = list(samples)
    if not samples:
        raise ValueError("need at least one training sample")
    problem = MaterialFit(scene, samples, grid, config.max_bounces, config.band, config.gate)
    p0 = init or EstimateParams.initial(scene.n_segments)
    frozen = np.zeros(problem.n_params, dtype=bool)
    ns = scene.n_segments * N_BANDS
    nh = p0.tx.size
    if config.freeze_tx_gain0:
        frozen[ns] = True
    if not config.fit_gains:
        frozen[ns:] = True
    x, trace, best_trace = adam_minimize(problem.loss_and_grad, p0.to_vector(), config.lr,
                                         config.iterations, config.patience, frozen,
                                         config.beta1, config.beta2, config.eps)
    log.info("fit_materials: %d iterations, best loss %.4g", len(trace), best_trace[-1])
    assert nh == p0.rx.size
    return FitResult(p0.with_vector(x), trace, best_trace, len(trace))
