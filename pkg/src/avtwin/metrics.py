"""Room-acoustics metrics and RIR similarity errors."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
from scipy.signal import get_window, hilbert

from .signals import Rir

C50_SENTINEL = 80.0  # dB, reported when one side of the 50 ms split has no energy
STFT_WINDOWS = (64, 256, 1024)
FIT_RANGE = (-5.0, -35.0)


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class DecayCurve:
    times: np.ndarray  # seconds from tap 0
    level: np.ndarray  # dB re total energy; -inf once all energy has passed


def schroeder(rir: Rir) -> DecayCurve:
    """Backward-integrated energy decay in dB."""
    e = rir.taps ** 2
    total = e.sum()
    if total <= 0:
        raise MetricError("RIR has zero energy")
    tail = np.cumsum(e[::-1])[::-1] / total
    with np.errstate(divide="ignore"):
        level = 10 * np.log10(tail)
    level[0] = 0.0
    # float round-off can make the integral tick upward by an ulp
    level = np.minimum.accumulate(level)
    return DecayCurve(np.arange(len(e)) / rir.sample_rate, level)


def _fit_slope(curve: DecayCurve, hi: float, lo: float) -> float:
    L = curve.level
    if not np.any(L <= lo):
        raise MetricError(f"insufficient decay: curve never reaches {lo:g} dB")
    i0 = int(np.argmax(L <= hi))
    i1 = int(np.argmax(L <= lo))
    t, y = curve.times[i0:i1 + 1], L[i0:i1 + 1]
    ok = np.isfinite(y)
    t, y = t[ok], y[ok]
    if len(t) < 2:
        raise MetricError("insufficient decay: fewer than two taps inside the fit range")
    slope = np.polyfit(t, y, 1)[0]
    if slope >= 0:
        raise MetricError("insufficient decay: non-negative fitted slope")
    return slope


def t60(rir: Rir) -> float:
    """Reverberation time from a least-squares fit of the -5 to -35 dB decay."""
    slope = _fit_slope(schroeder(rir), *FIT_RANGE)
    return float(-60.0 / slope)


def edt(rir: Rir) -> float:
    """Early decay time: six times the time to fall to -10 dB."""
    c = schroeder(rir)
    below = np.nonzero(c.level <= -10.0)[0]
    if len(below) == 0:
        raise MetricError("insufficient decay: curve never reaches -10 dB")
    i = int(below[0])
    if i == 0:
        return 0.0
    # linear interpolation between the bracketing taps (-inf handled as a step)
    l0, l1 = c.level[i - 1], c.level[i]
    frac = 1.0 if not np.isfinite(l1) else (l0 + 10.0) / (l0 - l1)
    return float(6.0 * (c.times[i - 1] + frac * (c.times[i] - c.times[i - 1])))


def c50(rir: Rir) -> float:
    """Clarity: early (first 50 ms after tap 0) to late energy ratio in dB."""
    k = int(round(0.050 * rir.sample_rate))
    e = rir.taps ** 2
    early, late = e[:k].sum(), e[k:].sum()
    if early <= 0 and late <= 0:
        raise MetricError("RIR has zero energy")
    if late <= 0:
        return C50_SENTINEL
    if early <= 0:
        return -C50_SENTINEL
    return float(np.clip(10 * np.log10(early / late), -C50_SENTINEL, C50_SENTINEL))


def _pair(a: Rir, b: Rir):
    if a.sample_rate != b.sample_rate:
        raise MetricError("sample rates differ")
    n = max(len(a), len(b))
    return a.padded(n).taps, b.padded(n).taps


def env_err(a: Rir, b: Rir) -> float:
    x, y = _pair(a, b)
    return float(np.mean(np.abs(np.abs(hilbert(x)) - np.abs(hilbert(y)))))


def amp_err(a: Rir, b: Rir) -> float:
    x, y = _pair(a, b)
    return float(np.mean(np.abs(np.abs(np.fft.rfft(x)) - np.abs(np.fft.rfft(y)))))


def _frame_layout(n: int, win: int):
    hop = max(1, win // 4)
    pad = win // 2
    total = n + 2 * pad
    n_frames = 1 + int(np.ceil(max(total - win, 0) / hop))
    return hop, pad, n_frames, (n_frames - 1) * hop + win


def stft_frames(x: np.ndarray, win: int) -> np.ndarray:
    """Hann-windowed frames (hop win/4, win/2 zeros each side), shape (frames, win)."""
    hop, pad, n_frames, length = _frame_layout(len(x), win)
    xp = np.zeros(length)
    xp[pad:pad + len(x)] = x
    idx = np.arange(n_frames)[:, None] * hop + np.arange(win)[None, :]
    return xp[idx] * hann(win)


def hann(win: int) -> np.ndarray:
    """Periodic Hann window scaled to unit sum."""
    w = get_window("hann", win)
    return w / w.sum()


def stft_mag(x: np.ndarray, win: int) -> np.ndarray:
    return np.abs(np.fft.rfft(stft_frames(x, win), axis=1))


def ms_stft_err(a: Rir, b: Rir, windows=STFT_WINDOWS) -> float:
    x, y = _pair(a, b)
    return float(sum(np.mean(np.abs(stft_mag(x, w) - stft_mag(y, w))) for w in windows))


METRIC_COLUMNS = ("t60_diff", "c50_diff", "edt_diff", "env_err", "amp_err", "ms_stft_err")


def _safe(f, r):
    try:
        return f(r)
    except MetricError:
        return float("nan")


def compare(a: Rir, b: Rir) -> dict:
    """One report row: absolute metric differences plus the pairwise errors."""
    row = {}
    for name, f in (("t60", t60), ("c50", c50), ("edt", edt)):
        row[f"{name}_diff"] = abs(_safe(f, a) - _safe(f, b))
    row["env_err"] = env_err(a, b)
    row["amp_err"] = amp_err(a, b)
    row["ms_stft_err"] = ms_stft_err(a, b)
    return row


def report_csv(rows, names=None) -> str:
    """CSV text with one row per RIR pair and one column per metric."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("pair",) + METRIC_COLUMNS)
    for i, row in enumerate(rows):
        name = names[i] if names is not None else str(i)
        w.writerow([name] + [repr(float(row[c])) for c in METRIC_COLUMNS])
    return buf.getvalue()
