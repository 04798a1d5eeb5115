import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.integrate import quad

from dvfs_energy.errors import (
    InsufficientSamples,
    InvalidTrace,
    MissingSnapshot,
    WindowOutOfRange,
)
from dvfs_energy.telemetry import (
    CounterValidation,
    EnergyMeasurement,
    EnergyMethod,
    Phase,
    PhaseWindow,
    PollingSampler,
    PowerTrace,
    cross_validate,
    energy_with_fallback,
    integrate_energy,
    measure_window,
    read_trace_csv,
    write_trace_csv,
)

from conftest import constant_trace

D = Phase.DECODE


def win(a, b, **kw):
    return PhaseWindow(D, a, b, **kw)


def test_constant_trace_integrates_exactly():
    tr = constant_trace(100.0, 2.0)
    assert integrate_energy(tr, win(0.0, 2.0)) == pytest.approx(200.0, rel=1e-12)


def test_linear_ramp():
    t = np.linspace(0.0, 1.0, 21)
    tr = PowerTrace.from_arrays(t, 100 + 100 * t)
    assert integrate_energy(tr, win(0.0, 1.0)) == pytest.approx(150.0, rel=1e-12)


def test_sinusoid_against_dense_quadrature():
    t = np.arange(0.0, 1.0 + 1e-9, 0.05)
    f = lambda x: 200 + 50 * math.sin(2 * math.pi * x)
    tr = PowerTrace.from_arrays(t, [f(x) for x in t])
    # reference: adaptive quadrature of the piecewise-linear interpolant would be
    # circular, so compare with the true integral and the trapezoid error bound
    exact, _ = quad(f, 0.0, 1.0)
    h = 0.05
    bound = (1.0 / 12) * h**2 * 50 * (2 * math.pi) ** 2
    assert abs(integrate_energy(tr, win(0.0, 1.0)) - exact) <= bound
    dense = np.arange(0.0, 1.0 + 1e-12, 0.001)
    assert exact == pytest.approx(np.trapezoid([f(x) for x in dense], dense), abs=1e-3)


def test_interpolated_window_edges():
    t = np.linspace(0.0, 1.0, 11)
    tr = PowerTrace.from_arrays(t, 100 + 100 * t)
    # integral of 100 + 100x over [0.23, 0.77]
    expected = 100 * 0.54 + 50 * (0.77**2 - 0.23**2)
    assert integrate_energy(tr, win(0.23, 0.77)) == pytest.approx(expected, rel=1e-12)


def test_window_outside_trace():
    tr = constant_trace(100.0, 1.0)
    with pytest.raises(WindowOutOfRange):
        integrate_energy(tr, win(0.5, 1.5))
    with pytest.raises(WindowOutOfRange):
        integrate_energy(tr, win(-0.1, 0.5))


def test_insufficient_samples():
    tr = PowerTrace.from_arrays([0.0], [100.0])
    with pytest.raises(InsufficientSamples):
        integrate_energy(tr, win(0.0, 0.01))


def test_trace_invariants():
    with pytest.raises(InvalidTrace):
        PowerTrace.from_arrays([0.0, 0.05, 0.05], [1.0, 1.0, 1.0])
    with pytest.raises(InvalidTrace):
        PowerTrace.from_arrays([0.0, 0.05], [100.0, 0.0])
    with pytest.raises(InvalidTrace):
        PowerTrace.from_arrays([0.0, 0.05], [100.0, 2000.0])
    with pytest.raises(InvalidTrace):
        PowerTrace.from_arrays([0.0, 0.05, 0.5], [1.0, 1.0, 1.0])
    # the same spacing is fine across a declared gap
    tr = PowerTrace.from_arrays([0.0, 0.05, 0.5], [1.0, 1.0, 1.0], gaps={2})
    assert len(tr) == 3


def test_window_requires_positive_duration():
    with pytest.raises(ValueError):
        win(1.0, 1.0)


def test_fallback_short_window():
    tr = constant_trace(100.0, 1.0)
    m = energy_with_fallback(tr, win(0.1, 0.15, snapshot_power=150.0))
    assert m.method is EnergyMethod.SNAPSHOT_FALLBACK
    assert m.energy == pytest.approx(7.5)


def test_fallback_long_window():
    tr = constant_trace(100.0, 1.0)
    m = energy_with_fallback(tr, win(0.2, 0.4, snapshot_power=150.0))
    assert m.method is EnergyMethod.TRAPEZOID
    assert m.energy == pytest.approx(20.0, rel=1e-12)


def test_fallback_boundary_uses_trapezoid():
    tr = constant_trace(100.0, 1.0)
    m = energy_with_fallback(tr, win(0.3, 0.4, snapshot_power=150.0))
    assert m.method is EnergyMethod.TRAPEZOID
    assert m.energy == pytest.approx(10.0, rel=1e-12)


def test_fallback_needs_snapshot():
    tr = constant_trace(100.0, 1.0)
    with pytest.raises(MissingSnapshot):
        energy_with_fallback(tr, win(0.1, 0.15))


def test_counter_agreement():
    w = win(0.0, 1.0, counter_energy=101.5)
    m = cross_validate(EnergyMeasurement(100.0, EnergyMethod.TRAPEZOID), w)
    assert m.validation is CounterValidation.AGREES
    assert m.relative_gap == pytest.approx(0.015)
    assert m.energy == 100.0


def test_counter_disagreement_does_not_override(caplog):
    w = win(0.0, 1.0, counter_energy=110.0)
    m = cross_validate(EnergyMeasurement(100.0, EnergyMethod.TRAPEZOID), w)
    assert m.validation is CounterValidation.DISAGREES
    assert m.relative_gap == pytest.approx(0.10)
    assert m.energy == 100.0
    assert "disagrees" in caplog.text


def test_counter_ignored_for_short_windows():
    w = win(0.0, 0.15, counter_energy=15.0)
    m = cross_validate(EnergyMeasurement(14.0, EnergyMethod.TRAPEZOID), w)
    assert m.validation is CounterValidation.UNAVAILABLE
    assert m.relative_gap is None


def test_gap_crossing_is_flagged():
    t = [0.0, 0.05, 0.10, 0.6, 0.65, 0.7]
    tr = PowerTrace.from_arrays(t, [100.0] * 6, gaps={3})
    m = measure_window(tr, win(0.0, 0.7))
    assert m.crossed_gap
    assert m.energy == pytest.approx(70.0)
    assert not measure_window(tr, win(0.6, 0.7)).crossed_gap


def test_csv_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    t = np.cumsum(rng.uniform(0.045, 0.055, 40))
    tr = PowerTrace.from_arrays(t, rng.uniform(100, 300, 40), np.full(40, 1830.0), np.full(40, 43.5), gaps={7})
    path = tmp_path / "trace.csv"
    write_trace_csv(tr, path)
    back = read_trace_csv(path)
    assert np.array_equal(back.timestamps, tr.timestamps)
    assert np.array_equal(back.power, tr.power)
    assert back.gaps == tr.gaps
    assert path.read_text().splitlines()[1] == "timestamp_s,power_w,sm_clock_mhz,temp_c"


def test_polling_sampler_with_fake_clock():
    now = [0.0]
    reads = iter(range(1000))

    def read():
        next(reads)
        return 150.0, 1830.0, 43.0

    s = PollingSampler(read, cadence=0.01, clock=lambda: now[0])
    s.start()
    for _ in range(5):
        now[0] += 0.01
        s._sample()
    now[0] += 0.1  # stalled poll loop
    trace = s.stop()
    assert len(trace) == 7
    assert trace.gaps == frozenset({6})


def test_polling_sampler_threaded():
    s = PollingSampler(lambda: (120.0, 780.0, 44.0), cadence=0.005)
    s.start()
    import time

    time.sleep(0.05)
    trace = s.stop()
    assert len(trace) >= 3
    assert np.all(np.diff(trace.timestamps) > 0)


# -- properties ------------------------------------------------------------------

@st.composite
def random_traces(draw):
    n = draw(st.integers(3, 40))
    rng = np.random.default_rng(draw(st.integers(0, 2**32 - 1)))
    t = np.concatenate([[0.0], np.cumsum(rng.uniform(0.026, 0.149, n - 1))])
    p = rng.uniform(50, 700, n)
    return PowerTrace.from_arrays(t, p)


@given(random_traces(), st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_window_additivity(tr, u, v, w):
    lo, hi = tr.span
    a, b, c = sorted(lo + (hi - lo) * x for x in (u, v, w))
    if not (a < b < c):
        return
    whole = integrate_energy(tr, win(a, c))
    parts = integrate_energy(tr, win(a, b)) + integrate_energy(tr, win(b, c))
    assert parts == pytest.approx(whole, rel=1e-9, abs=1e-9)


@given(random_traces(), st.floats(0.01, 100.0))
def test_energy_scales_with_power(tr, k):
    lo, hi = tr.span
    w = win(lo, hi)
    assert integrate_energy(tr.scaled(k), w) == pytest.approx(k * integrate_energy(tr, w), rel=1e-12)


@given(st.lists(st.tuples(st.floats(0.01, 0.2), st.floats(-500, 500)), min_size=1, max_size=20),
       st.floats(50, 600))
def test_piecewise_linear_is_exact(segments, p0):
    t, p = [0.0], [p0]
    for dt, dp in segments:
        t.append(t[-1] + dt)
        p.append(min(max(p[-1] + dp, 1.0), 1000.0))
    t, p = np.array(t), np.array(p)
    tr = PowerTrace.from_arrays(t, p, nominal_cadence=0.05, gaps=set(range(1, len(t))))
    exact = float(np.sum(np.diff(t) * (p[1:] + p[:-1]) / 2))
    assert integrate_energy(tr, win(0.0, t[-1])) == pytest.approx(exact, rel=1e-12)


@given(st.floats(0.001, 0.5), st.floats(1.0, 700.0))
def test_fallback_only_below_threshold(duration, snap):
    tr = constant_trace(100.0, 1.0)
    m = energy_with_fallback(tr, win(0.2, 0.2 + duration, snapshot_power=snap))
    if m.method is EnergyMethod.SNAPSHOT_FALLBACK:
        assert duration < 0.1
    else:
        assert duration >= 0.1 * (1 - 1e-9)
    assert m.energy >= 0
