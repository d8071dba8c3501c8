"""Two-way acoustic handshake between two unsynchronised devices.

The receiver (Rx) emits the sync chirp c1 at logged times t1. The
transmitter (Tx) hears it at t2 (its own clock), waits a short processing
latency and answers with the RIR chirp c2 at logged time t3, which Rx hears
at t4. Clock offsets cancel in ((t4 - t1) - (t3 - t2)) / 2.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose, Scene
from .raytrace import FrequencyGrid, PathTable, enumerate_paths, paths_spectrum
from .signals import (C1, C2, DECIMATION, DELTA_T, GROWTH_A, HMIN_FACTOR, RIR_LENGTH, SAMPLE_RATE,
                      THRESHOLD, ChirpSpec, NoArrivalError, StreamingDetector, Waveform,
                      envelope, extract_rir, gen_chirp, matched_filter, pick_direct_path)

log = logging.getLogger(__name__)


class HandshakeError(ValueError):
    pass


@dataclass(frozen=True)
class ClockModel:
    """local = offset + (1 + drift * 1e-6) * global."""

    offset: float = 0.0
    drift: float = 0.0  # ppm

    def __post_init__(self):
        if abs(self.drift) >= 1000:
            raise HandshakeError("clock drift must be below 1000 ppm")

    @property
    def rate(self) -> float:
        return 1.0 + self.drift * 1e-6

    def local(self, t):
        return self.offset + self.rate * np.asarray(t, float)

    def to_global(self, t):
        return (np.asarray(t, float) - self.offset) / self.rate


@dataclass(frozen=True)
class HandshakeRecord:
    t1: float  # Rx clock, c1 emission
    t2: float  # Tx clock, c1 arrival
    t3: float  # Tx clock, c2 emission
    t4: float  # Rx clock, c2 arrival

    def __post_init__(self):
        if not self.t4 > self.t1:
            raise HandshakeError("t4 must follow t1")
        if not self.t3 >= self.t2:
            raise HandshakeError("t3 must not precede t2")

    def to_dict(self):
        return {"t1": self.t1, "t2": self.t2, "t3": self.t3, "t4": self.t4}


def tof_from_record(rec: HandshakeRecord) -> float:
    tof = ((rec.t4 - rec.t1) - (rec.t3 - rec.t2)) / 2.0
    if tof < 0:
        raise HandshakeError(f"negative time of flight {tof:.3e} s (invalid exchange)")
    return tof


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Time-stamped poses (global clock); positions interpolate linearly."""

    times: np.ndarray
    positions: np.ndarray
    orientation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        t = np.asarray(self.times, float).reshape(-1)
        p = np.asarray(self.positions, float).reshape(-1, 3)
        if len(t) != len(p) or len(t) == 0:
            raise HandshakeError("trajectory needs matching, non-empty times and positions")
        if np.any(np.diff(t) <= 0):
            raise HandshakeError("trajectory times must increase")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "positions", p)

    @classmethod
    def static(cls, pose) -> "Trajectory":
        pose = pose if isinstance(pose, Pose) else Pose(pose)
        return cls(np.array([0.0]), pose.position[None], pose.orientation)

    @classmethod
    def line(cls, start, end, t_start, t_end) -> "Trajectory":
        return cls(np.array([t_start, t_end]), np.array([start, end], float))

    @classmethod
    def walk(cls, lo, hi, speed, duration, seed=0, step=1.0) -> "Trajectory":
        """Random piecewise-linear walk at constant speed inside the box [lo, hi]."""
        rng = np.random.default_rng(seed)
        lo, hi = np.asarray(lo, float), np.asarray(hi, float)
        pts = [rng.uniform(lo, hi)]
        times = [0.0]
        heading = rng.normal(size=3) * np.array([1, 1, 0])
        while times[-1] < duration:
            heading = heading + rng.normal(scale=0.5, size=3) * np.array([1, 1, 0])
            heading /= np.linalg.norm(heading) + 1e-12
            nxt = pts[-1] + heading * speed * step
            for ax in range(3):  # reflect off the box walls
                if nxt[ax] < lo[ax] or nxt[ax] > hi[ax]:
                    heading[ax] = -heading[ax]
                    nxt[ax] = np.clip(2 * np.clip(nxt[ax], lo[ax], hi[ax]) - nxt[ax], lo[ax], hi[ax])
            pts.append(nxt)
            times.append(times[-1] + step)
        return cls(np.array(times), np.array(pts))

    @property
    def duration(self) -> float:
        return float(self.times[-1] - self.times[0])

    def position(self, t: float) -> np.ndarray:
        return np.array([np.interp(t, self.times, self.positions[:, k]) for k in range(3)])

    def pose(self, t: float) -> Pose:
        return Pose(self.position(t), self.orientation)


@dataclass
class SessionConfig:
    tx: Trajectory
    rx: Trajectory
    n_exchanges: int | None = None  # default: as many as fit in the trajectory span
    interval: float = 2.0
    latency: tuple = (0.05, 0.15)
    snr_db: float | None = 20.0  # None: noiseless
    start: float = 0.5  # global time of the first c1
    c1: ChirpSpec = C1
    c2: ChirpSpec = C2
    max_bounces: int = 3
    tail: float = 1.0
    sample_rate: float = SAMPLE_RATE
    seed: int = 0

    def __post_init__(self):
        dur = max(self.c1.duration, self.c2.duration)
        if self.interval < 2 * dur:
            raise HandshakeError("chirp interval must be at least twice the chirp duration")
        if not 0 <= self.latency[0] <= self.latency[1]:
            raise HandshakeError("latency range must be ordered and non-negative")

    def exchange_count(self) -> int:
        if self.n_exchanges is not None:
            return int(self.n_exchanges)
        span = max(self.tx.times[-1], self.rx.times[-1]) - self.start
        return max(0, int(np.floor(span / self.interval)) + 1) if span >= 0 else 0


@dataclass(frozen=True)
class ExchangeTruth:
    index: int
    t1: float  # Rx clock
    t2: float  # Tx clock, direct-path arrival of c1
    t3: float  # Tx clock
    t4: float  # Rx clock, direct-path arrival of c2
    tof_c1: float  # propagation delays in seconds of global time
    tof_c2: float
    pose_tx: Pose
    pose_rx: Pose

    @property
    def tof(self) -> float:
        return 0.5 * (self.tof_c1 + self.tof_c2)

    def to_dict(self):
        return {"index": self.index, "t1": self.t1, "t2": self.t2, "t3": self.t3, "t4": self.t4,
                "tof_c1": self.tof_c1, "tof_c2": self.tof_c2, "tof": self.tof,
                "pose_tx": self.pose_tx.to_dict(), "pose_rx": self.pose_rx.to_dict()}


@dataclass(frozen=True, eq=False)
class DeviceRecording:
    """A device's microphone signal (its own clock) plus its logged emission times."""

    audio: Waveform
    emissions: np.ndarray
    probe: ChirpSpec


@dataclass(frozen=True, eq=False)
class SessionResult:
    rx: DeviceRecording
    tx: DeviceRecording
    truth: list


def _place(rec: np.ndarray, t0: float, fs: float, chirp: np.ndarray, chirp_spec: np.ndarray,
           n_fft: int, arrivals: np.ndarray, amps: np.ndarray, table: PathTable, refl, grid):
    """Add the chirp, filtered by the path set, arriving at local times ``arrivals``."""
    first = int(np.floor((arrivals.min() - t0) * fs)) - 64
    delays = arrivals - (t0 + first / fs)
    h = paths_spectrum(table, amps, delays, refl, grid)
    seg = np.fft.irfft(h * chirp_spec, n_fft)
    lo, hi = max(first, 0), min(first + n_fft, len(rec))
    if hi > lo:
        rec[lo:hi] += seg[lo - first:hi - first]


def simulate_session(scene: Scene, config: SessionConfig, clock_rx: ClockModel | None = None,
                     clock_tx: ClockModel | None = None) -> SessionResult:
    """Synthesize both devices' recordings of a handshake session.

    Devices are frozen at their emission-time poses for each chirp. Each
    recording carries white noise whose level is set, exchange by exchange,
    from the direct-path power of the chirp arriving at that device.
    """
    clock_rx = clock_rx or ClockModel()
    clock_tx = clock_tx or ClockModel()
    cfg = config
    fs = cfg.sample_rate
    rng = np.random.default_rng(cfg.seed)
    n_ex = cfg.exchange_count()
    c1 = gen_chirp(cfg.c1, fs).samples
    c2 = gen_chirp(cfg.c2, fs).samples
    c = scene.speed_of_sound
    refl = scene.reflectance()

    t_end = cfg.start + max(n_ex, 1) * cfg.interval + cfg.tail
    n_rec = int(np.ceil(t_end * fs))
    rx_t0 = float(clock_rx.local(0.0))
    tx_t0 = float(clock_tx.local(0.0))
    rx_rec = np.zeros(n_rec)
    tx_rec = np.zeros(n_rec)
    sig_rx = np.zeros(n_ex)
    sig_tx = np.zeros(n_ex)
    truth = []
    cache = {}

    def channel(p_from, p_to):
        key = (tuple(np.round(p_from, 12)), tuple(np.round(p_to, 12)))
        if key not in cache:
            for p in (p_from, p_to):
                if not scene.contains(p):
                    raise HandshakeError(f"trajectory point {p} outside the scene")
            paths = enumerate_paths(scene, p_from, p_to, cfg.max_bounces)
            t = PathTable.build(paths, scene.n_segments)
            cache.clear() if len(cache) > 4096 else None
            cache[key] = t
        return cache[key]

    def grid_for(n_chirp, table):
        span = table.length.max() / c if len(table) else 0.0
        n = 1 << int(np.ceil(np.log2(n_chirp + span * fs + 256)))
        return FrequencyGrid(n, fs)

    spectra = {}

    def chirp_fft(x, n):
        key = (id(x), n)
        if key not in spectra:
            spectra[key] = np.fft.rfft(x, n)
        return spectra[key]

    p1 = float(np.mean(c1 ** 2))
    p2 = float(np.mean(c2 ** 2))
    for k in range(n_ex):
        t1 = float(clock_rx.local(0.0) + clock_rx.rate * (cfg.start + k * cfg.interval))
        g1 = float(clock_rx.to_global(t1))
        prx, ptx = cfg.rx.position(g1), cfg.tx.position(g1)
        tab = channel(prx, ptx)
        tof1 = float(tab.length.min() / c)
        arr_tx = clock_tx.local(g1 + tab.length / c)
        grid = grid_for(len(c1), tab)
        _place(tx_rec, tx_t0, fs, c1, chirp_fft(c1, grid.n_fft), grid.n_fft, arr_tx,
               1.0 / tab.length, tab, refl, grid)
        sig_tx[k] = p1 / float(tab.length.min()) ** 2
        t2 = float(clock_tx.local(g1 + tof1))
        t3 = t2 + float(rng.uniform(*cfg.latency))
        g3 = float(clock_tx.to_global(t3))
        prx3, ptx3 = cfg.rx.position(g3), cfg.tx.position(g3)
        tab3 = channel(ptx3, prx3)
        tof2 = float(tab3.length.min() / c)
        arr_rx = clock_rx.local(g3 + tab3.length / c)
        grid3 = grid_for(len(c2), tab3)
        _place(rx_rec, rx_t0, fs, c2, chirp_fft(c2, grid3.n_fft), grid3.n_fft, arr_rx,
               1.0 / tab3.length, tab3, refl, grid3)
        sig_rx[k] = p2 / float(tab3.length.min()) ** 2
        t4 = float(clock_rx.local(g3 + tof2))
        truth.append(ExchangeTruth(k, t1, t2, t3, t4, tof1, tof2, cfg.tx.pose(g1), cfg.rx.pose(g1)))

    if cfg.snr_db is not None and n_ex:
        for rec, sig in ((tx_rec, sig_tx), (rx_rec, sig_rx)):
            sigma = np.sqrt(sig / 10 ** (cfg.snr_db / 10))
            # exchange k owns samples from its c1 emission to the next one
            bounds = (np.array([cfg.start + k * cfg.interval for k in range(1, n_ex)]) * fs).astype(int)
            idx = np.searchsorted(bounds, np.arange(n_rec), side="right")
            rec += rng.standard_normal(n_rec) * sigma[idx]

    t1s = np.array([e.t1 for e in truth])
    t3s = np.array([e.t3 for e in truth])
    rx = DeviceRecording(Waveform(rx_rec, fs, rx_t0), t1s, cfg.c1)
    tx = DeviceRecording(Waveform(tx_rec, fs, tx_t0), t3s, cfg.c2)
    return SessionResult(rx, tx, truth)


# ---------------------------------------------------------------- protocol

@dataclass
class DetectorConfig:
    threshold: float = THRESHOLD
    decimation: int = DECIMATION
    h_min: float | None = None
    delta_t: float = DELTA_T
    growth_a: float = GROWTH_A
    search: float = 0.02  # seconds either side of a coarse detection for arrival picking
    h_rel: float = 0.15  # candidate floor relative to the window's envelope maximum
    chunk: float = 1.0  # seconds per streaming chunk
    rir_length: float = RIR_LENGTH
    interval: float = 2.0  # emission period, bounds the pairing windows


@dataclass
class ProtocolResult:
    exchanges: list  # (HandshakeRecord, Rir)
    indices: list  # index of each exchange's t1 in the Rx emission log
    report: dict

    def __iter__(self):
        return iter(self.exchanges)

    def __len__(self):
        return len(self.exchanges)


def _chunks(w: Waveform, seconds: float):
    n = max(1, int(round(seconds * w.sample_rate)))
    for i in range(0, len(w), n):
        yield w.samples[i:i + n]


def detect_arrivals(audio: Waveform, spec: ChirpSpec, cfg: DetectorConfig) -> np.ndarray:
    """Streaming detection followed by direct-path picking on the full-rate matched filter."""
    det = StreamingDetector(spec, audio.sample_rate, cfg.threshold, cfg.decimation, audio.t0)
    coarse = []
    for ch in _chunks(audio, cfg.chunk):
        coarse.extend(det.push(ch))
    coarse.extend(det.flush())
    probe = gen_chirp(spec, audio.sample_rate)
    fs = audio.sample_rate
    out = []
    for ev in coarse:
        i0 = max(0, int(np.floor(audio.index_of(ev.time - cfg.search))))
        i1 = min(len(audio), int(np.ceil(audio.index_of(ev.time + cfg.search))) + len(probe))
        seg = Waveform(audio.samples[i0:i1], fs, audio.t0 + i0 / fs)
        mf = matched_filter(seg, probe)
        # keep lags whose probe copy lies inside the segment
        k0 = len(probe) - 1
        k1 = len(mf) - (len(probe) - 1)
        if k1 <= k0:
            continue
        env = Waveform(envelope(mf.samples)[k0:k1], fs, mf.t0 + k0 / fs)
        h_min = cfg.h_min
        if h_min is None and len(env):
            # a floor relative to the peak keeps pre-arrival noise bumps from
            # triggering the sharp-rise rule on a sidelobe of the direct path
            h_min = max(HMIN_FACTOR * float(np.median(env.samples)), cfg.h_rel * float(env.samples.max()))
        try:
            out.append(pick_direct_path(env, h_min, cfg.delta_t, cfg.growth_a))
        except NoArrivalError:
            continue
    return np.array(out)


def _offset_window(t1, t3, width):
    """Start of the width-wide window holding the most t3 - t1 differences."""
    d = np.sort((t3[:, None] - t1[None, :]).ravel())
    if len(d) == 0:
        return None
    j = np.searchsorted(d, d + width, side="right")
    best = int(np.argmax(j - np.arange(len(d))))
    return d[best]


def run_protocol(rx: DeviceRecording, tx: DeviceRecording, c1: ChirpSpec = C1, c2: ChirpSpec = C2,
                 config: DetectorConfig | None = None) -> ProtocolResult:
    """Detect, pair and convert one session into handshake records and RIRs.

    t2 comes from c1 detections in the Tx recording and t4 from c2 detections
    in the Rx recording; t1 and t3 come from the devices' emission logs.
    Pairing t3 to t1 uses the dominant t3 - t1 cluster, which absorbs the
    unknown clock offset.
    """
    cfg = config or DetectorConfig()
    t1 = np.asarray(rx.emissions, float)
    t3 = np.asarray(tx.emissions, float)
    t2_det = detect_arrivals(tx.audio, c1, cfg)
    t4_det = detect_arrivals(rx.audio, c2, cfg)
    half = cfg.interval / 2
    report = {"emitted": int(len(t1)), "c1_detections": int(len(t2_det)),
              "c2_detections": int(len(t4_det)), "paired": 0, "unpaired": 0, "invalid": 0}
    exchanges, indices = [], []
    used2, used4 = set(), set()
    if len(t1) and len(t3):
        w0 = _offset_window(t1, t3, half)
        probe2 = gen_chirp(c2, rx.audio.sample_rate)
        for j, t3j in enumerate(t3):
            d = t3j - t1
            cand = np.nonzero((d >= w0) & (d <= w0 + half))[0]
            if len(cand) != 1:
                continue
            i = int(cand[0])
            # t2: latest c1 detection before the response, within half an interval
            k2 = np.nonzero((t2_det <= t3j) & (t2_det > t3j - half))[0]
            # t4: c2 detection after t1, within the exchange's interval
            k4 = np.nonzero((t4_det > t1[i]) & (t4_det < t1[i] + cfg.interval))[0]
            if not len(k2) or not len(k4):
                continue
            k2, k4 = int(k2[-1]), int(k4[0])
            try:
                rec = HandshakeRecord(float(t1[i]), float(t2_det[k2]), float(t3j), float(t4_det[k4]))
                tof = tof_from_record(rec)
            except HandshakeError:
                report["invalid"] += 1
                continue
            rir = extract_rir(rx.audio, probe2, rec.t4, tof=tof, length=cfg.rir_length)
            used2.add(k2)
            used4.add(k4)
            exchanges.append((rec, rir))
            indices.append(i)
    order = np.argsort(indices, kind="stable")
    exchanges = [exchanges[o] for o in order]
    indices = [indices[o] for o in order]
    report["paired"] = len(exchanges)
    report["unpaired"] = (len(t2_det) - len(used2)) + (len(t4_det) - len(used4))
    report["detection_rate"] = len(exchanges) / len(t1) if len(t1) else 1.0
    return ProtocolResult(exchanges, indices, report)
