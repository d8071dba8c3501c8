"""Probe chirps, matched filtering, streaming detection and RIR extraction."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np
from scipy import signal as sps

SAMPLE_RATE = 48_000
FADE = 0.005  # seconds of raised-cosine taper at each chirp end
DECIMATION = 8
THRESHOLD = 0.3
HMIN_FACTOR = 5.0
DELTA_T = 0.002
GROWTH_A = 2.0
RIR_LENGTH = 0.3


class SignalError(ValueError):
    pass


class NoArrivalError(SignalError):
    pass


@dataclass(frozen=True, eq=False)
class Waveform:
    """Uniformly sampled mono signal; ``t0`` is the time of sample 0 in the owner's clock."""

    samples: np.ndarray
    sample_rate: float = SAMPLE_RATE
    t0: float = 0.0

    def __post_init__(self):
        x = np.asarray(self.samples)
        if not np.iscomplexobj(x):
            x = x.astype(float, copy=False)
        x = x.reshape(-1)
        if self.sample_rate <= 0:
            raise SignalError("sample_rate must be positive")
        if not np.all(np.isfinite(x)):
            raise SignalError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "t0", float(self.t0))

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    @property
    def times(self) -> np.ndarray:
        return self.t0 + np.arange(len(self.samples)) / self.sample_rate

    def index_of(self, t: float) -> float:
        return (t - self.t0) * self.sample_rate

    def shifted(self, dt: float) -> "Waveform":
        return Waveform(self.samples, self.sample_rate, self.t0 + dt)

    def scaled(self, alpha: float) -> "Waveform":
        return Waveform(self.samples * alpha, self.sample_rate, self.t0)


@dataclass(frozen=True)
class ChirpSpec:
    f_start: float
    f_end: float
    duration: float
    amplitude: float = 1.0

    @property
    def band(self):
        return min(self.f_start, self.f_end), max(self.f_start, self.f_end)


# the two probes of the handshake: a high sync chirp and a low RIR chirp
C1 = ChirpSpec(11_000.0, 19_000.0, 0.2)
C2 = ChirpSpec(50.0, 9_000.0, 0.2)


@dataclass(frozen=True, eq=False)
class Rir:
    """Impulse response taps; tap 0 sits at absolute delay ``onset`` seconds."""

    taps: np.ndarray
    sample_rate: float = SAMPLE_RATE
    onset: float = 0.0

    def __post_init__(self):
        h = np.asarray(self.taps, dtype=float).reshape(-1)
        if not np.all(np.isfinite(h)):
            raise SignalError("RIR taps must be finite")
        if self.onset < 0:
            raise SignalError("RIR onset must be non-negative")
        object.__setattr__(self, "taps", h)
        object.__setattr__(self, "onset", float(self.onset))

    def __len__(self):
        return len(self.taps)

    @property
    def times(self) -> np.ndarray:
        return self.onset + np.arange(len(self.taps)) / self.sample_rate

    def padded(self, n: int) -> "Rir":
        h = np.zeros(n)
        m = min(n, len(self.taps))
        h[:m] = self.taps[:m]
        return Rir(h, self.sample_rate, self.onset)

    def absolute(self, n: int | None = None) -> "Rir":
        """Same response on an absolute time axis (onset 0), delay rounded to a sample."""
        k = int(round(self.onset * self.sample_rate))
        n = len(self.taps) + k if n is None else n
        h = np.zeros(n)
        m = max(0, min(len(self.taps), n - k))
        h[k:k + m] = self.taps[:m]
        return Rir(h, self.sample_rate, 0.0)

    def as_waveform(self) -> Waveform:
        return Waveform(self.taps, self.sample_rate, self.onset)


@dataclass(frozen=True)
class DetectionEvent:
    time: float
    corr_coeff: float


def gen_chirp(spec: ChirpSpec, sample_rate: float = SAMPLE_RATE, fade: float = FADE) -> Waveform:
    """Linear FM sweep from ``f_start`` to ``f_end`` with raised-cosine ends."""
    nyq = sample_rate / 2
    for f in (spec.f_start, spec.f_end):
        if not 0 < f <= nyq:
            raise SignalError(f"chirp frequency {f} Hz outside (0, {nyq}] Hz at fs={sample_rate}")
    if spec.duration <= 0:
        raise SignalError("chirp duration must be positive")
    n = int(round(spec.duration * sample_rate))
    t = np.arange(n) / sample_rate
    k = (spec.f_end - spec.f_start) / spec.duration
    x = spec.amplitude * np.sin(2 * np.pi * (spec.f_start * t + 0.5 * k * t * t))
    nf = min(int(round(fade * sample_rate)), n // 2)
    if nf > 0:
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(nf) / nf)
        x[:nf] *= ramp
        x[n - nf:] *= ramp[::-1]
    return Waveform(x, sample_rate, 0.0)


def _check_rates(a: Waveform, b: Waveform):
    if a.sample_rate != b.sample_rate:
        raise SignalError(f"sample rates differ: {a.sample_rate} vs {b.sample_rate}")


def matched_filter(x: Waveform, c: Waveform) -> Waveform:
    """Cross-correlation of ``x`` with probe ``c``, scaled by 1/||c||^2.

    The output is indexed by lag; its ``t0`` is chosen so that a sample's time
    is the instant (in ``x``'s clock, relative to ``c.t0``) at which a copy of
    ``c`` would have to start to produce that sample's peak.
    """
    _check_rates(x, c)
    energy = float(np.dot(c.samples, c.samples))
    if energy == 0:
        raise SignalError("probe has zero energy")
    if len(x) == 0:
        return Waveform(np.zeros(0), x.sample_rate, x.t0 - c.t0)
    y = sps.correlate(x.samples, c.samples, mode="full", method="auto") / energy
    t0 = x.t0 - c.t0 - (len(c) - 1) / x.sample_rate
    return Waveform(y, x.sample_rate, t0)


class StreamingDetector:
    """Normalised-correlation chirp detector fed chunk by chunk.

    Pipeline: template-band Butterworth band-pass, complex mix to baseband,
    anti-alias low-pass, keep every ``decimation``-th sample, then the
    magnitude of the normalised correlation coefficient against the template
    processed the same way. An event is emitted at a local maximum above
    ``threshold`` once one template length has passed without a larger value.
    Filter states and the sample counter carry across chunks, so chunking
    never changes the result.
    """

    def __init__(self, template: ChirpSpec, sample_rate: float = SAMPLE_RATE,
                 threshold: float = THRESHOLD, decimation: int = DECIMATION, t0: float = 0.0):
        lo, hi = template.band
        nyq = sample_rate / 2
        if hi > nyq:
            raise SignalError("template band exceeds Nyquist")
        if hi - lo < 0.02 * hi:
            lo, hi = 0.97 * lo, min(1.03 * hi, 0.99 * nyq)
        hi = min(hi, 0.99 * nyq)
        self.sample_rate = float(sample_rate)
        self.threshold = float(threshold)
        self.dec = int(decimation)
        self.t0 = float(t0)
        self.fc = 0.5 * (lo + hi)
        self._bp = sps.butter(4, [lo, hi], btype="bandpass", fs=sample_rate, output="sos")
        cut = 0.5 * sample_rate / self.dec
        self._lp = sps.butter(4, min(cut, 0.49 * sample_rate), fs=sample_rate, output="sos")
        chirp = gen_chirp(template, sample_rate)
        self.template_len = len(chirp)
        self._reset_state()
        tpl = self._front_end(chirp.samples)
        self._reset_state()
        self.tpl = tpl
        self.L = len(tpl)
        self.tpl_norm = float(np.linalg.norm(tpl))

    def _reset_state(self):
        self._zbp = np.zeros((self._bp.shape[0], 2))
        self._zlp = np.zeros((self._lp.shape[0], 2), dtype=complex)
        self._n = 0
        self._buf = np.zeros(0, dtype=complex)
        self._buf_start = 0  # decimated index of _buf[0]
        self._cand = None
        self.events: list[DetectionEvent] = []

    def _front_end(self, x):
        x = np.asarray(x, dtype=float)
        idx = self._n + np.arange(len(x))
        y, self._zbp = sps.sosfilt(self._bp, x, zi=self._zbp)
        frac = np.mod(idx * (self.fc / self.sample_rate), 1.0)
        z = y * np.exp(-2j * np.pi * frac)
        z, self._zlp = sps.sosfilt(self._lp, z, zi=self._zlp)
        first = (-self._n) % self.dec
        self._n += len(x)
        return z[first::self.dec]

    def push(self, chunk) -> list[DetectionEvent]:
        x = chunk.samples if isinstance(chunk, Waveform) else np.asarray(chunk, float)
        new = self._front_end(x)
        if len(new):
            self._buf = np.concatenate([self._buf, new])
        out = []
        n_win = len(self._buf) - self.L + 1
        if n_win > 0:
            corr = sps.correlate(self._buf, self.tpl, mode="valid", method="fft")[:n_win]
            p = np.abs(self._buf) ** 2
            cs = np.concatenate([[0.0], np.cumsum(p)])
            e = cs[self.L:self.L + n_win] - cs[:n_win]
            floor = 1e-12 * max(float(e.max()), 0.0) + 1e-300
            good = e > floor
            coef = np.zeros(n_win)
            coef[good] = np.abs(corr[good]) / (np.sqrt(e[good]) * self.tpl_norm)
            coef = np.minimum(coef, 1.0)
            out = self._scan(coef, self._buf_start)
            self._buf = self._buf[n_win:]
            self._buf_start += n_win
        return out

    def _scan(self, coef, j0):
        out = []
        above = np.nonzero(coef >= self.threshold)[0]
        if self._cand is None and len(above) == 0:
            return out
        # only indices above threshold or the expiry of a pending candidate matter
        pos = 0
        n = len(coef)
        while True:
            if self._cand is not None:
                cj, cc = self._cand
                expire = cj + self.L + 1 - j0  # local index at which cand is final
                # larger values before expiry replace the candidate
                seg_end = min(max(expire, 0), n)
                if pos < seg_end:
                    seg = coef[pos:seg_end]
                    k = int(np.argmax(seg))
                    if seg[k] > cc:
                        self._cand = (j0 + pos + k, float(seg[k]))
                        pos = pos + k + 1
                        continue
                    pos = seg_end
                if expire <= n:
                    out.append(self._emit(*self._cand))
                    self._cand = None
                    pos = max(pos, expire)
                    continue
                return out
            nxt = above[above >= pos]
            if len(nxt) == 0:
                return out
            k = int(nxt[0])
            self._cand = (j0 + k, float(coef[k]))
            pos = k + 1

    def _emit(self, j, c):
        ev = DetectionEvent(self.t0 + j * self.dec / self.sample_rate, c)
        self.events.append(ev)
        return ev

    def flush(self) -> list[DetectionEvent]:
        if self._cand is None:
            return []
        ev = self._emit(*self._cand)
        self._cand = None
        return [ev]


def detect_chirp_stream(stream, template: ChirpSpec, threshold: float = THRESHOLD,
                        decimation: int = DECIMATION, sample_rate: float | None = None,
                        t0: float | None = None) -> list[DetectionEvent]:
    """Run :class:`StreamingDetector` over a waveform or an iterable of chunks."""
    if isinstance(stream, Waveform):
        chunks: Iterable = [stream]
    else:
        chunks = stream
    det = None
    events = []
    for ch in chunks:
        if det is None:
            fs = sample_rate or (ch.sample_rate if isinstance(ch, Waveform) else SAMPLE_RATE)
            start = t0 if t0 is not None else (ch.t0 if isinstance(ch, Waveform) else 0.0)
            det = StreamingDetector(template, fs, threshold, decimation, start)
        events.extend(det.push(ch))
    if det is not None:
        events.extend(det.flush())
    return events


def envelope(x: np.ndarray) -> np.ndarray:
    return np.abs(sps.hilbert(x)) if len(x) else np.zeros(0)


def pick_direct_path(corr: Waveform, h_min: float | None = None, delta_t: float = DELTA_T,
                     growth_a: float = GROWTH_A, refine: bool = True) -> float:
    """Arrival time of the direct path in a correlation trace.

    Candidates are peaks of |corr| above ``h_min`` (default five times the
    median magnitude). Scanning forward, a candidate is accepted when a later
    candidate within ``delta_t`` is at least ``growth_a`` times higher (a
    sharp rise), or when nothing larger follows within ``delta_t`` and the
    candidate itself is within a factor ``growth_a`` of the global maximum.
    The result is the location of the maximum on [candidate, candidate +
    delta_t], parabolically interpolated when ``refine`` is set.
    """
    y = np.abs(np.asarray(corr.samples))
    if len(y) == 0:
        raise NoArrivalError("empty correlation trace")
    if h_min is None:
        h_min = HMIN_FACTOR * float(np.median(y))
    peaks, props = sps.find_peaks(y, height=h_min)
    peaks = peaks[y[peaks] > h_min]
    if len(peaks) == 0:
        raise NoArrivalError(f"no correlation peak above h_min={h_min:.3g}")
    fs = corr.sample_rate
    win = int(round(delta_t * fs))
    heights = y[peaks]
    strong = heights.max() / growth_a
    chosen = None
    for k, p in enumerate(peaks):
        later = heights[k + 1:][peaks[k + 1:] <= p + win]
        if len(later) and later.max() >= growth_a * heights[k]:
            chosen = p
            break
        if (len(later) == 0 or later.max() <= heights[k]) and heights[k] >= strong:
            chosen = p
            break
    if chosen is None:
        chosen = peaks[int(np.argmax(heights))]
    seg = y[chosen:chosen + win + 1]
    i = chosen + int(np.argmax(seg))
    frac = 0.0
    if refine and 0 < i < len(y) - 1:
        a, b, c = y[i - 1], y[i], y[i + 1]
        den = a - 2 * b + c
        if den < 0:
            frac = float(np.clip(0.5 * (a - c) / den, -0.5, 0.5))
    return corr.t0 + (i + frac) / fs


def extract_rir(received: Waveform, chirp: Waveform, arrival: float, tof: float | None = None,
                length: float = RIR_LENGTH) -> Rir:
    """Matched-filter output cropped so that tap 0 is the direct path at ``arrival``.

    ``tof`` becomes the RIR onset; without it the onset is ``arrival - chirp.t0``
    (meaningful when both devices share a clock).
    """
    _check_rates(received, chirp)
    fs = received.sample_rate
    pos = received.index_of(arrival)
    if not 0 <= pos < len(received):
        raise SignalError(f"arrival {arrival:.6f} s outside the received span")
    n = int(round(length * fs))
    start = max(0, int(np.floor(pos)) - 2)
    seg = received.samples[start:start + n + len(chirp) + 4]
    mf = matched_filter(Waveform(seg, fs, received.t0 + start / fs), chirp)
    i = int(round(mf.index_of(arrival)))
    taps = np.zeros(n)
    avail = mf.samples[i:i + n]
    taps[:len(avail)] = avail
    onset = (arrival - chirp.t0) if tof is None else tof
    if onset < 0:
        raise SignalError("negative onset; pass the time of flight explicitly")
    return Rir(taps, fs, onset)
