import numpy as np
import pytest
from hypothesis import given, strategies as st

from dvfs_energy.device import (
    DeviceSpec,
    DvfsState,
    PowerComponents,
    PowerModelParams,
    apply_clock_lock,
    apply_memory_clock,
    apply_power_cap,
    calibrate,
    cap_resolution,
    free_running_state,
    load_device_spec,
    load_power_params,
    save_device_spec,
    save_power_params,
    simulated_power,
    throttle_artefact,
)
from dvfs_energy.errors import UnderdeterminedFit, UnsupportedClock
from dvfs_energy.telemetry import Phase

D, P = Phase.DECODE, Phase.PREFILL
SPEC = DeviceSpec()


def params(mem, sm, arch="X", phase=D):
    return PowerModelParams({(arch, phase): PowerComponents(mem, sm)})


def test_spec_defaults_and_ridge():
    assert SPEC.supported_locks == (390.0, 780.0, 1185.0, 1590.0, 1830.0, 1980.0)
    assert SPEC.peak_compute / SPEC.hbm_bandwidth == pytest.approx(206, rel=0.05)


def test_spec_rejects_inconsistent_values():
    with pytest.raises(ValueError):
        DeviceSpec(ridge_intensity=300.0)
    with pytest.raises(ValueError):
        DeviceSpec(base_clock=2000.0)


def test_spec_file_round_trip(tmp_path):
    save_device_spec(SPEC, tmp_path / "d.json")
    assert load_device_spec(tmp_path / "d.json") == SPEC
    assert "tdp_w" in (tmp_path / "d.json").read_text()


@pytest.mark.parametrize("req,actual", [(1980, 1830), (1830, 1830), (1590, 1590), (1185, 1185), (780, 780), (390, 390), (1700, 1700)])
def test_clock_lock_clamp(req, actual):
    s = apply_clock_lock(SPEC, req)
    assert s.actual_clock == actual
    assert s.requested_lock == req
    assert s.clamped == (actual < req)


@pytest.mark.parametrize("req", [389.0, 2000.0])
def test_clock_lock_out_of_range(req):
    with pytest.raises(UnsupportedClock):
        apply_clock_lock(SPEC, req)


@given(st.floats(390.0, 1980.0))
def test_lock_idempotent_and_below_base(req):
    s = apply_clock_lock(SPEC, req)
    assert s == apply_clock_lock(SPEC, req)
    assert s.actual_clock <= SPEC.base_clock


def test_free_running_state():
    s = free_running_state(SPEC)
    assert s.free_running and s.actual_clock == 1980 and not s.cap_engaged


def test_memory_clock_ignored():
    s = apply_clock_lock(SPEC, 780)
    s2, readback = apply_memory_clock(SPEC, s, 1000)
    assert s2 == s
    assert readback == SPEC.rated_memory_clock


def test_idle_floor():
    p = params(0.0, 0.0)
    for f in SPEC.supported_locks:
        assert simulated_power(SPEC, p, "X", D, f) == 75.0


def test_power_formula():
    p = params(40.0, 90.0)
    assert simulated_power(SPEC, p, "X", D, 915.0, 2.0) == pytest.approx(75 + 2 * (40 + 45))


@given(st.floats(0, 300), st.floats(0, 300), st.floats(390, 1980), st.floats(390, 1980), st.floats(0.5, 3))
def test_power_monotone_in_clock(mem, sm, f1, f2, u):
    p = params(mem, sm)
    lo, hi = sorted((f1, f2))
    assert simulated_power(SPEC, p, "X", D, lo, u) <= simulated_power(SPEC, p, "X", D, hi, u)
    assert simulated_power(SPEC, p, "X", D, lo, u) >= SPEC.idle_power


def test_params_check():
    with pytest.raises(ValueError):
        params(500.0, 400.0).check(SPEC)
    with pytest.raises(ValueError):
        PowerComponents(-1.0, 1.0)


def test_cap_not_engaged_below_draw(model):
    spec, profiles, power = model
    s = cap_resolution(spec, power, "GQA", D, apply_power_cap(spec, 280.0))
    assert s.actual_clock == 1830 and not s.cap_engaged


def test_cap_engages_on_heavy_load():
    # 650 W at the base clock: idle 75 + 95 + 480
    p = params(95.0, 480.0)
    s = cap_resolution(SPEC, p, "X", D, apply_power_cap(SPEC, 500.0))
    # oracle: invert 75 + 95 + 480 f / 1830 <= 500  ->  f <= 1258.1 MHz, highest lock 1185
    f_max = (500 - 75 - 95) * 1830 / 480
    expected = max(c for c in SPEC.supported_locks if c <= f_max)
    assert s.cap_engaged and s.actual_clock == expected == 1185
    assert simulated_power(SPEC, p, "X", D, s.actual_clock) <= 500


def test_cap_floor_flagged():
    s = cap_resolution(SPEC, params(95.0, 480.0), "X", D, apply_power_cap(SPEC, 100.0))
    assert s.actual_clock == 390 and s.cap_engaged and s.cap_floor_hit


def test_cap_at_tdp_never_engages_on_decode(model):
    spec, profiles, power = model
    for arch in profiles:
        s = cap_resolution(spec, power, arch, D, apply_power_cap(spec, 700.0), load=32 ** 0.1)
        assert not s.cap_engaged and s.actual_clock == spec.base_clock


@given(st.floats(0, 400), st.floats(0, 500), st.floats(80, 1000), st.floats(0.5, 2))
def test_cap_resolution_never_raises_clock(mem, sm, cap, load):
    p = params(mem, sm)
    start = apply_power_cap(SPEC, cap)
    s = cap_resolution(SPEC, p, "X", D, start, load)
    assert s.actual_clock <= start.actual_clock
    if cap >= SPEC.tdp and simulated_power(SPEC, p, "X", D, start.actual_clock, load) <= SPEC.tdp:
        assert s == start


def test_throttle_artefact():
    s = apply_power_cap(SPEC, 420.0)
    assert throttle_artefact(SPEC, s, 1, 0.0) == s
    t = throttle_artefact(SPEC, s, 1, 1.0)
    assert t.actual_clock == 1590 and t.throttled
    seq = [throttle_artefact(SPEC, s, k, 0.3).actual_clock for k in range(50)]
    assert seq == [throttle_artefact(SPEC, s, k, 0.3).actual_clock for k in range(50)]
    assert set(seq) == {1590.0, 1830.0}
    with pytest.raises(ValueError):
        throttle_artefact(SPEC, s, 1, 1.5)


def test_calibrate_two_point_oracle():
    fit = calibrate([("GQA", "decode", 1, 1830, 207.0), ("GQA", "decode", 1, 366, 138.0)], SPEC)
    c = fit.get("GQA", D)
    # hand solve: slope = 69 W / 1464 MHz
    sm = 69 / 1464 * 1830
    assert c.sm_dynamic_ref == pytest.approx(sm, rel=1e-9)
    assert c.mem_static == pytest.approx(207 - 75 - sm, rel=1e-9)
    assert c.sm_dynamic_ref == pytest.approx(86, abs=0.5) and c.mem_static == pytest.approx(46, abs=0.5)


def test_calibrate_gdn_oracle():
    fit = calibrate([("GDN", "decode", 1, 1830, 167.0), ("GDN", "decode", 1, 780, 117.0)], SPEC)
    c = fit.get("GDN", D)
    assert c.sm_dynamic_ref == pytest.approx(50 / 1050 * 1830, rel=1e-9)
    assert c.sm_dynamic_ref == pytest.approx(87, abs=0.5)
    assert c.mem_static == pytest.approx(5, abs=0.5)


def test_calibrate_flat_power():
    fit = calibrate([("X", "decode", 1, 1830, 150.0), ("X", "decode", 1, 780, 150.0)], SPEC)
    assert fit.get("X", D).sm_dynamic_ref == pytest.approx(0.0, abs=1e-9)


def test_calibrate_needs_two_clocks():
    with pytest.raises(UnderdeterminedFit):
        calibrate([("X", "decode", 1, 1830, 150.0), ("X", "decode", 2, 1830, 160.0)], SPEC)


def test_shipped_power_model(model):
    spec, profiles, power = model
    power.check(spec)
    # five-fold clock reduction buys only about 1.5x power for GQA
    ratio = simulated_power(spec, power, "GQA", D, 1830) / simulated_power(spec, power, "GQA", D, 366)
    assert 1.4 <= ratio <= 1.7
    assert simulated_power(spec, power, "GDN", D, 1830) == pytest.approx(167, abs=0.5)
    assert simulated_power(spec, power, "GDN", D, 780) == pytest.approx(117, abs=0.5)


def test_power_params_round_trip(tmp_path, power):
    save_power_params(power, tmp_path / "p.json")
    back = load_power_params(tmp_path / "p.json")
    assert back.components == power.components
