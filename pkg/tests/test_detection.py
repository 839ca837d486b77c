import numpy as np
import pytest
from hypothesis import given, strategies as st

from motcorr.correlator import correlate_channels
from motcorr.detection import (AnalyzerConfig, ClickStream, DetectionGeometry, dead_time_filter, detect,
                               estimate_signal_fraction, project_emission, signal_fraction)
from motcorr.trajectory import EmissionRecord

K_DIAG = (1 / np.sqrt(2), 1 / np.sqrt(2), 0.0)
Z = np.array([0.0, 0.0, 1.0])
CIRC, LIN, NONE = AnalyzerConfig("circular"), AnalyzerConfig("linear"), AnalyzerConfig("none")


def record(times, q=1, axis=Z, duration=None):
    t = np.sort(np.asarray(times, float))
    n = len(t)
    return EmissionRecord(t, np.full(n, q, np.int8), np.tile(axis, (n, 1)), np.zeros((n, 3)),
                          np.zeros(n), np.zeros(n, np.int32), duration or (t[-1] + 1e-6 if n else 1e-3))


def test_pi_along_axis_invisible():
    geom = DetectionGeometry(k_det=(0, 0, 1))
    pa, pb, pe = project_emission(0, Z, geom, CIRC)
    assert pa == pytest.approx(0, abs=1e-15) and pb == pytest.approx(0, abs=1e-15)
    assert pe == pytest.approx(1.0)


def test_sigma_along_axis_single_circular_channel():
    geom = DetectionGeometry(k_det=(0, 0, 1))
    pa, pb, _ = project_emission(1, Z, geom, CIRC)
    assert min(pa, pb) == pytest.approx(0, abs=1e-15)
    # on-axis sigma weight 3/2 * (1/2)*(1+cos^2 0) = 3/2
    assert max(pa, pb) == pytest.approx(1.5 * geom.efficiency)
    pa2, pb2, _ = project_emission(-1, Z, geom, CIRC)
    assert (pa > pb) != (pa2 > pb2)


def test_sigma_side_on_linear():
    geom = DetectionGeometry(k_det=K_DIAG)
    pa, pb, _ = project_emission(1, Z, geom, LIN)
    assert pa == pytest.approx(0, abs=1e-15)
    assert pb == pytest.approx(0.75 * geom.efficiency)


@given(q=st.sampled_from([-1, 0, 1]), th=st.floats(0, np.pi), ph=st.floats(0, 2 * np.pi),
       kind=st.sampled_from(["circular", "linear", "none"]))
def test_probabilities_sum_and_bounds(q, th, ph, kind):
    axis = np.array([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)])
    geom = DetectionGeometry(solid_angle_fraction=0.5, quantum_efficiency=0.9)
    p = project_emission(q, axis, geom, AnalyzerConfig(kind))
    assert sum(p) == pytest.approx(1.0)
    assert all(-1e-15 <= x <= 1 for x in p)


def test_isotropic_average_is_efficiency():
    # averaged over emission direction the dipole weight integrates to 1
    geom = DetectionGeometry()
    rng = np.random.default_rng(1)
    tot = []
    for axis in rng.normal(size=(4000, 3)):
        axis /= np.linalg.norm(axis)
        pa, pb, _ = project_emission(0, axis, geom, NONE)
        tot.append(pa + pb)
    assert np.mean(tot) == pytest.approx(geom.efficiency, rel=0.03)


def test_zero_efficiency_empty():
    geom = DetectionGeometry(quantum_efficiency=0.0, dark_rate=0.0)
    st_ = detect(record(np.linspace(0, 1e-4, 100)), geom, CIRC, seed=1)
    assert st_.n_clicks == 0


def test_dead_time_removes_second_click():
    t = np.array([1000, 1300], dtype=np.int64)
    assert dead_time_filter(t, 700).tolist() == [True, False]
    assert dead_time_filter(t, 200).tolist() == [True, True]


def test_dead_time_non_paralyzable():
    t = np.array([0, 500, 800, 1300, 1500], dtype=np.int64)
    # 500 is dropped but does not extend the dead window; 800 survives
    assert dead_time_filter(t, 700).tolist() == [True, False, True, False, True]


def test_dead_time_rejects_unsorted():
    with pytest.raises(ValueError):
        dead_time_filter(np.array([5, 1]), 2)


@given(st.lists(st.integers(0, 10 ** 6), max_size=200), st.integers(0, 5000))
def test_dead_time_gaps(ts, dead):
    t = np.sort(np.asarray(ts, dtype=np.int64))
    kept = t[dead_time_filter(t, dead)]
    if len(kept) > 1 and dead > 0:
        assert np.min(np.diff(kept)) >= dead


def test_background_only_cross_flat():
    geom = DetectionGeometry(dark_rate=2e4, dead_time=0.0, resolution=1e-9)
    s = detect(record([], duration=2.0), geom, CIRC, seed=4)
    h = correlate_channels(s, (0, 1), bin_width=1e-6, max_lag=50e-6)
    assert np.mean(h.g2) == pytest.approx(1.0, abs=0.01)
    assert np.all(np.abs(h.g2 - 1) < 5 * h.err)


def test_detect_deterministic():
    rec = record(np.random.default_rng(0).random(500) * 1e-3, duration=1e-3)
    geom = DetectionGeometry(solid_angle_fraction=0.5, quantum_efficiency=0.9)
    a, b = detect(rec, geom, CIRC, seed=7), detect(rec, geom, CIRC, seed=7)
    assert all(np.array_equal(x, y) for x, y in zip(a.times, b.times))


def test_timestamps_on_grid():
    rec = record(np.random.default_rng(0).random(500) * 1e-3, duration=1e-3)
    s = detect(rec, DetectionGeometry(solid_angle_fraction=0.5, quantum_efficiency=0.9), NONE, seed=2)
    for t in s.times:
        assert np.all(t % 100 == 0) and np.all(np.diff(t) >= 700)


def test_signal_fraction_examples():
    assert signal_fraction(3000.0, 0.0) == 1.0
    assert signal_fraction(5000.0, 1000.0) == pytest.approx(0.8)


def test_signal_fraction_round_trip():
    S, B, T = 4000.0, 1000.0, 20.0
    rng = np.random.default_rng(3)
    geom = DetectionGeometry(dark_rate=B / 2, dead_time=0.0)
    cal = detect(record([], duration=T), geom, NONE, seed=11)
    # signal photons at rate S are detected with efficiency 1 for this check
    sig = np.sort(rng.random(rng.poisson(S * T)) * T)
    bg = detect(record([], duration=T), geom, NONE, seed=12)
    times = tuple(np.sort(np.concatenate([b, (sig[i::2] * 1e9).astype(np.int64)]))
                  for i, b in enumerate(bg.times))
    stream = ClickStream(times, ("a", "b"), T)
    p, sp = estimate_signal_fraction(stream, cal)
    assert abs(p - 0.8) < 3 * sp


def test_geometry_validation():
    with pytest.raises(ValueError):
        DetectionGeometry(k_det=(1, 1, 0))
    with pytest.raises(ValueError):
        DetectionGeometry(quantum_efficiency=1.2)
    with pytest.raises(ValueError):
        AnalyzerConfig("elliptical")
