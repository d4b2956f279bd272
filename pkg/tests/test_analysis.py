"""PWM measurement, scoring, and the hardware/software jitter classifier.

The frozen constants (period 1007, duty 251/1007, score 0.9940) follow from
the DUT timing model: a 7-instruction software loop stretches each cycle by
7 us and the CLR commit lands one tick after the WAIT ends, so the high
phase is 251 of 1007 us when 250 of 1000 was requested.
"""
from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from labgrade import analysis, engine, firmware
from labgrade.analysis import (
    AnalysisConfig,
    InsufficientResolution,
    classify_jitter,
    measure_pwm,
    score_session,
)
from labgrade.dut import assemble, get_profile
from labgrade.engine import SignalCapture, encode_rle
from labgrade.model import CaptureConfig, Session

V1 = get_profile("dut-v1")


def capture_of(source: str, sessions, rate_hz=1_000_000, duration_us=8000):
    cfg = CaptureConfig(rate_hz=rate_hz, duration_us=duration_us, pin="P0")
    cap, _ = engine.capture(assemble(source), sessions, cfg, V1)
    return cap


def ideal_square(period_samples: int, high_samples: int, n: int) -> SignalCapture:
    """Synthetic perfect square wave, 1 sample per us."""
    one_cycle = np.concatenate(
        [np.ones(high_samples, dtype=np.uint8), np.zeros(period_samples - high_samples, dtype=np.uint8)]
    )
    levels = np.tile(one_cycle, n // period_samples + 1)[:n]
    return SignalCapture(1_000_000, n, "P0", "dut-v1", encode_rle(levels))


# --- measurement oracles ---------------------------------------------------------


def test_hardware_pwm_measurement_oracle():
    sessions = (Session(0, 1000, 0.25),)
    m = measure_pwm(capture_of(firmware.HARDWARE_PWM, sessions), sessions).sessions[0]
    assert m.mean_period_us == pytest.approx(1000.0)
    assert m.mean_duty == pytest.approx(0.25)
    assert m.cycle_count == 5
    assert m.settled


def test_software_pwm_measurement_oracle():
    sessions = (Session(0, 1000, 0.25),)
    m = measure_pwm(capture_of(firmware.SOFTWARE_PWM, sessions), sessions).sessions[0]
    assert m.mean_period_us == pytest.approx(1007.0)
    assert m.mean_duty == pytest.approx(251 / 1007)
    assert m.cycle_count == 5


def test_blank_capture_measures_nothing():
    sessions = (Session(0, 1000, 0.25),)
    m = measure_pwm(capture_of(firmware.BLANK, sessions), sessions).sessions[0]
    assert m.mean_period_us is None
    assert m.cycle_count == 0
    assert not m.settled
    assert m.mean_level == 0.0


def test_multi_session_slicing():
    sessions = (Session(0, 1000, 0.25), Session(5000, 500, 0.5))
    m = measure_pwm(capture_of(firmware.HARDWARE_PWM, sessions, duration_us=10_000), sessions)
    assert m.sessions[0].mean_period_us == pytest.approx(1000.0)
    assert m.sessions[0].mean_duty == pytest.approx(0.25)
    assert m.sessions[1].mean_period_us == pytest.approx(500.0)
    assert m.sessions[1].mean_duty == pytest.approx(0.5)


def test_settle_discard_hides_reaction_time():
    # The second session's wave re-arms a few instructions after the port
    # flips; the 2-period settle window absorbs that boundary garbage.
    sessions = (Session(0, 1000, 0.25), Session(4000, 400, 0.5))
    m = measure_pwm(capture_of(firmware.HARDWARE_PWM, sessions), sessions).sessions[1]
    assert m.settled
    assert m.mean_period_us == pytest.approx(400.0)


def test_deglitch_absorbs_spikes_only():
    # raw: spike pair around each toggle of a 100-sample-period wave
    runs = [[0, 50], [1, 1], [0, 1], [1, 48], [0, 1], [1, 1], [0, 48]]
    cleaned = analysis._deglitch([list(r) for r in runs], min_len=24)
    assert cleaned == [[0, 52], [1, 50], [0, 48]]
    # min_len 1 is the no-op guard
    assert analysis._deglitch([list(r) for r in runs], 1) == runs


def test_low_rate_measurement_still_works():
    sessions = (Session(0, 1000, 0.25),)
    cap = capture_of(firmware.HARDWARE_PWM, sessions, rate_hz=20_000, duration_us=8000)
    m = measure_pwm(cap, sessions).sessions[0]
    assert m.mean_period_us == pytest.approx(1000.0, abs=50.0)
    assert m.mean_duty == pytest.approx(0.25, abs=0.05)


# --- scoring ----------------------------------------------------------------------


def test_score_oracles():
    sessions = (Session(0, 1000, 0.25),)
    interval = 1.0  # 1 MHz
    hw = measure_pwm(capture_of(firmware.HARDWARE_PWM, sessions), sessions).sessions[0]
    assert score_session(hw, sessions[0], interval) == pytest.approx(1.0)
    sw = measure_pwm(capture_of(firmware.SOFTWARE_PWM, sessions), sessions).sessions[0]
    # e_p = 7/1000, deadband 1/1000, duty error under deadband: 1 - 0.006
    assert score_session(sw, sessions[0], interval) == pytest.approx(0.9940)
    blank = measure_pwm(capture_of(firmware.BLANK, sessions), sessions).sessions[0]
    assert score_session(blank, sessions[0], interval) == 0.0


def test_half_duty_bug_scores_partial():
    sessions = (Session(0, 1000, 0.25),)
    m = measure_pwm(capture_of(firmware.BUGGY_HALF_DUTY, sessions), sessions).sessions[0]
    # 25 // 2 = 12 percent, measured exactly at full rate
    assert m.mean_duty == pytest.approx(0.12)
    # duty off by 0.13: loses that minus the one-interval deadband
    assert score_session(m, sessions[0], 1.0) == pytest.approx(1.0 - (0.13 - 0.001))


def test_wrong_pin_bug_scores_zero():
    sessions = (Session(0, 1000, 0.25),)
    m = measure_pwm(capture_of(firmware.BUGGY_WRONG_PIN, sessions), sessions).sessions[0]
    assert m.cycle_count == 0
    assert score_session(m, sessions[0], 1.0) == 0.0


def test_constant_level_sessions_score_on_level_fraction():
    n = 5000  # long enough that the settle window does not swallow it all
    high = SignalCapture(1_000_000, n, "P0", "dut-v1", ((1, n),))
    low = SignalCapture(1_000_000, n, "P0", "dut-v1", ((0, n),))
    always_on = (Session(0, 1000, 1.0),)
    always_off = (Session(0, 1000, 0.0),)
    m_high = measure_pwm(high, always_on).sessions[0]
    m_low = measure_pwm(low, always_off).sessions[0]
    assert score_session(m_high, always_on[0], 1.0) == pytest.approx(1.0)
    assert score_session(m_low, always_off[0], 1.0) == pytest.approx(1.0)
    # and the cross pairings score 0
    assert score_session(measure_pwm(low, always_on).sessions[0], always_on[0], 1.0) == 0.0
    assert score_session(measure_pwm(high, always_off).sessions[0], always_off[0], 1.0) == 0.0


def test_score_decreases_monotonically_with_period_error():
    expected = Session(0, 1000, 0.5)
    scores = []
    for measured_period in (1000.0, 1005.0, 1020.0, 1100.0, 1500.0):
        m = analysis.SessionMeasurement(0, measured_period, 0.5, 6, True, 0.5)
        scores.append(score_session(m, expected, 1.0))
    assert scores == sorted(scores, reverse=True)
    assert scores[0] == 1.0


def test_score_symmetric_in_error_sign():
    expected = Session(0, 1000, 0.5)
    up = analysis.SessionMeasurement(0, 1030.0, 0.5, 6, True, 0.5)
    down = analysis.SessionMeasurement(0, 970.0, 0.5, 6, True, 0.5)
    assert score_session(up, expected, 1.0) == pytest.approx(
        score_session(down, expected, 1.0)
    )


def test_deadband_forgives_quantization():
    expected = Session(0, 1000, 0.5)
    # 200 us sampling (5 kHz): up to one interval of period error is free
    within = analysis.SessionMeasurement(0, 1200.0, 0.5, 6, True, 0.5)
    assert score_session(within, expected, 200.0) == pytest.approx(1.0)
    beyond = analysis.SessionMeasurement(0, 1300.0, 0.5, 6, True, 0.5)
    assert score_session(beyond, expected, 200.0) == pytest.approx(0.9)


@given(
    period=st.integers(min_value=100, max_value=2000),
    duty_pct=st.integers(min_value=10, max_value=90),
)
@settings(max_examples=60, deadline=None)
def test_ideal_wave_scores_full_marks(period, duty_pct):
    """Property: a perfect wave at the expected parameters always scores 1."""
    high = period * duty_pct // 100
    n = period * 8
    cap = ideal_square(period, high, n)
    sess = Session(0, period, high / period)
    m = measure_pwm(cap, (sess,)).sessions[0]
    assert m.settled
    assert score_session(m, sess, 1.0) == pytest.approx(1.0)


def test_downsampled_ideal_wave_is_exact():
    # 5 kHz sampling of a 4000 us / 25% wave: 20 samples per cycle, 5 high.
    # Quantization cancels exactly, so the measurement has no error at all.
    cycle = np.concatenate([np.ones(5, dtype=np.uint8), np.zeros(15, dtype=np.uint8)])
    levels = np.tile(cycle, 8)  # 160 samples = 32 ms at 5 kHz
    cap = SignalCapture(5000, 32_000, "P0", "dut-v1", encode_rle(levels))
    sess = Session(0, 4000, 0.25)
    m = measure_pwm(cap, (sess,)).sessions[0]
    assert m.mean_period_us == 4000.0
    assert m.mean_duty == 0.25
    assert score_session(m, sess, 200.0) == 1.0


# --- jitter classifier -------------------------------------------------------------


def test_jitter_verdicts_at_full_rate():
    sessions = (Session(0, 1000, 0.25),)
    hw = capture_of(firmware.HARDWARE_PWM, sessions, duration_us=15_000)
    sw = capture_of(firmware.SOFTWARE_PWM, sessions, duration_us=15_000)
    assert classify_jitter(hw).verdict == "hardware_pwm"
    assert classify_jitter(sw).verdict == "software_pwm"
    assert classify_jitter(hw).max_deviation_us == pytest.approx(0.0)


def test_jitter_requires_resolution():
    sessions = (Session(0, 1000, 0.25),)
    cap = capture_of(firmware.HARDWARE_PWM, sessions, rate_hz=5000, duration_us=15_000)
    with pytest.raises(InsufficientResolution):
        classify_jitter(cap)
    # 100 kHz is the documented floor and must work
    ok = capture_of(firmware.HARDWARE_PWM, sessions, rate_hz=100_000, duration_us=15_000)
    assert classify_jitter(ok).verdict in ("hardware_pwm", "software_pwm")


def test_jitter_indeterminate_on_few_cycles():
    sessions = (Session(0, 1000, 0.25),)
    cap = capture_of(firmware.HARDWARE_PWM, sessions, duration_us=5000)  # 4 cycles
    assert classify_jitter(cap).verdict == "indeterminate"
    silent = capture_of(firmware.BLANK, sessions, duration_us=5000)
    assert classify_jitter(silent).verdict == "indeterminate"


def test_jitter_thresholds_configurable():
    sessions = (Session(0, 1000, 0.25),)
    sw = capture_of(firmware.SOFTWARE_PWM, sessions, duration_us=15_000)
    lax = AnalysisConfig(hw_std_max_intervals=1e9, hw_maxdev_intervals=1e9)
    assert classify_jitter(sw, lax).verdict == "hardware_pwm"
