import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from avtwin.metrics import (C50_SENTINEL, METRIC_COLUMNS, MetricError, amp_err, c50, compare, edt,
                            env_err, ms_stft_err, report_csv, schroeder, t60)
from avtwin.signals import SAMPLE_RATE, Rir

FS = SAMPLE_RATE


def exp_rir(tau=0.1, seconds=1.5, seed=0, scale=1.0):
    t = np.arange(int(seconds * FS)) / FS
    return Rir(scale * np.random.default_rng(seed).standard_normal(len(t)) * np.exp(-t / tau), FS)


def impulse(n, at=0):
    x = np.zeros(n)
    x[at] = 1.0
    return Rir(x, FS)


# ---------------------------------------------------------------- decay curve

def test_impulse_curve_drops_at_once():
    c = schroeder(impulse(100))
    assert c.level[0] == 0.0
    assert np.all(np.isneginf(c.level[1:]))


def test_exponential_decay_slope():
    tau = 0.1
    c = schroeder(exp_rir(tau))
    sel = (c.level <= -5) & (c.level >= -35)
    slope = np.polyfit(c.times[sel], c.level[sel], 1)[0]
    assert slope == pytest.approx(-(20 / np.log(10)) / tau, rel=0.05)


def test_trailing_zeros_do_not_change_curve():
    h = exp_rir(seconds=0.5)
    a = schroeder(h).level
    b = schroeder(Rir(np.concatenate([h.taps, np.zeros(5000)]), FS)).level
    np.testing.assert_array_equal(b[:len(a)], a)


def test_curve_invariants_and_errors():
    c = schroeder(exp_rir(seed=3))
    assert c.level[0] == 0.0
    assert np.all(np.diff(c.level) <= 0)
    with pytest.raises(MetricError):
        schroeder(Rir(np.zeros(10), FS))


# ---------------------------------------------------------------- scalar metrics

def test_t60_of_exponential():
    assert t60(exp_rir(0.1)) == pytest.approx(6.91 * 0.1, rel=0.05)


@settings(max_examples=20, deadline=None)
@given(st.floats(1e-6, 1e6), st.integers(0, 100))
def test_t60_scale_invariant(scale, seed):
    h = exp_rir(seconds=1.0, seed=seed)
    assert t60(Rir(h.taps * scale, FS)) == pytest.approx(t60(h), rel=1e-9)


def test_c50_sentinel_and_errors():
    assert c50(impulse(4800)) == C50_SENTINEL
    assert c50(impulse(4800, at=3000)) == -C50_SENTINEL
    with pytest.raises(MetricError, match="insufficient decay"):
        t60(Rir(np.ones(1000), FS))  # a flat tail never reaches -35 dB before its end
    with pytest.raises(MetricError):
        edt(Rir(np.ones(5), FS))  # the last tap sits at -7 dB


def test_edt_of_exponential():
    # -10 dB is reached at t = tau ln(10) / 2, so EDT = 6 times that
    assert edt(exp_rir(0.1)) == pytest.approx(6 * 0.1 * np.log(10) / 2, rel=0.05)


@settings(max_examples=20, deadline=None)
@given(st.floats(0.01, 0.99), st.integers(0, 100))
def test_c50_increases_when_late_energy_drops(att, seed):
    h = exp_rir(0.15, seconds=0.5, seed=seed).taps.copy()
    k = int(0.05 * FS)
    g = h.copy()
    g[k:] *= att
    assert c50(Rir(g, FS)) > c50(Rir(h, FS))


# ---------------------------------------------------------------- pairwise errors

def test_identical_inputs_give_zero():
    h = exp_rir(seconds=0.4)
    row = compare(h, h)
    assert all(row[c] == 0.0 for c in METRIC_COLUMNS)


def test_polarity_blindness():
    h = exp_rir(seconds=0.3)
    g = Rir(-h.taps, FS)
    assert env_err(h, g) == pytest.approx(0.0, abs=1e-15)
    assert amp_err(h, g) == pytest.approx(0.0, abs=1e-15)
    assert ms_stft_err(h, g) == pytest.approx(0.0, abs=1e-15)


def test_delayed_impulse_envelope_error():
    n, d = 4800, 480  # 10 ms
    # discrete analytic signal of a unit impulse: 1 at 0, imaginary (2/n) cot(pi k/n) at odd k
    k = np.arange(n)
    env = np.zeros(n)
    env[0] = 1.0
    odd = k % 2 == 1
    env[odd] = 2.0 / n * np.abs(1.0 / np.tan(np.pi * k[odd] / n))
    want = np.mean(np.abs(env - np.roll(env, d)))
    assert env_err(impulse(n), impulse(n, d)) == pytest.approx(want, rel=1e-9)


rirs = st.lists(st.floats(-1, 1), min_size=64, max_size=400).map(lambda v: Rir(np.array(v), FS))


@settings(max_examples=40, deadline=None)
@given(rirs, rirs)
def test_pairwise_errors_symmetric_non_negative(a, b):
    for f in (env_err, amp_err, ms_stft_err):
        x, y = f(a, b), f(b, a)
        assert x >= 0
        assert x == pytest.approx(y, rel=1e-12, abs=1e-15)
        assert f(a, a) == 0.0


def test_pairwise_padding_and_rate_check():
    a = exp_rir(seconds=0.1)
    b = Rir(np.concatenate([a.taps, np.zeros(300)]), FS)
    assert env_err(a, b) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(MetricError):
        amp_err(a, Rir(a.taps, 16_000))


def test_report_csv_layout():
    h = exp_rir(seconds=0.4)
    text = report_csv([compare(h, h)], ["x"])
    head, row = text.strip().split("\n")
    assert head.split(",") == ["pair", *METRIC_COLUMNS]
    assert row.split(",")[0] == "x" and all(float(v) == 0.0 for v in row.split(",")[1:])
