"""Signal analysis: per-session PWM measurement, scoring, jitter classing.

All functions are pure: capture in, numbers out. The only state is the
AnalysisConfig, which holds the invented constants (settle window, scoring
deadbands, jitter thresholds) in one place so fixtures can pin them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .engine import SignalCapture, decode_rle
from .model import Session


class InsufficientResolution(Exception):
    """Capture rate too low to tell hardware PWM from a software loop."""


@dataclass(frozen=True)
class AnalysisConfig:
    settle_periods: int = 2  # expected periods discarded at each session start
    deadband_intervals: float = 1.0  # scoring deadband, in sample intervals
    hw_std_max_intervals: float = 1.0  # hardware verdict: period stddev cap
    hw_maxdev_intervals: float = 2.0  # hardware verdict: |p - median| cap
    min_cycles_for_verdict: int = 10
    min_jitter_rate_hz: int = 100_000


DEFAULT_CONFIG = AnalysisConfig()


@dataclass(frozen=True)
class SessionMeasurement:
    session_index: int
    mean_period_us: float | None  # absent when fewer than 2 complete cycles
    mean_duty: float | None
    cycle_count: int
    settled: bool
    mean_level: float  # fraction of analyzed samples that are high


@dataclass(frozen=True)
class PwmMeasurement:
    sessions: tuple[SessionMeasurement, ...]


@dataclass(frozen=True)
class JitterVerdict:
    verdict: str  # hardware_pwm | software_pwm | indeterminate
    max_deviation_us: float
    periods_us: tuple[float, ...]


def _runs_of(levels: np.ndarray) -> list[list[int]]:
    """[level, length] pairs for a (possibly empty) window."""
    if levels.size == 0:
        return []
    boundaries = np.flatnonzero(np.diff(levels)) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [levels.size]))
    return [[int(levels[s]), int(e - s)] for s, e in zip(starts, ends)]


def _deglitch(runs: list[list[int]], min_len: int) -> list[list[int]]:
    """Absorb runs shorter than min_len into their predecessor.

    Settle spikes from software pin writes appear as 1-2 sample blips; merging
    them into the preceding run restores the logical toggle instants. min_len
    comes from the expected session, so legitimately short phases survive.
    """
    if min_len <= 1 or not runs:
        return runs
    merged: list[list[int]] = []
    for level, length in runs:
        # A swallowed blip leaves the next run with the same level as the
        # tail of `merged`, so the second condition re-joins it.
        if merged and (length < min_len or merged[-1][0] == level):
            merged[-1][1] += length
        else:
            merged.append([level, length])
    return merged


def _rising_edges(runs: list[list[int]]) -> list[int]:
    """Sample offsets where the level changes 0 -> 1."""
    edges = []
    offset = 0
    for i, (level, length) in enumerate(runs):
        if level == 1 and i > 0:
            edges.append(offset)
        offset += length
    return edges


def _session_bounds(
    sessions: tuple[Session, ...], capture: SignalCapture
) -> list[tuple[int, int]]:
    """Per-session [start, end) sample index ranges."""
    n = capture.sample_count
    rate = capture.rate_hz
    bounds = []
    for i, s in enumerate(sessions):
        start = -(-s.start_us * rate // 1_000_000)  # ceil
        end = (
            -(-sessions[i + 1].start_us * rate // 1_000_000)
            if i + 1 < len(sessions)
            else n
        )
        bounds.append((min(start, n), min(end, n)))
    return bounds


def _expected_min_phase_samples(s: Session, rate_hz: int) -> int:
    high = s.duty * s.period_us * rate_hz / 1_000_000
    low = (1 - s.duty) * s.period_us * rate_hz / 1_000_000
    return int(min(high, low))


def measure_pwm(
    capture: SignalCapture,
    sessions: tuple[Session, ...],
    config: AnalysisConfig = DEFAULT_CONFIG,
) -> PwmMeasurement:
    """Slice the capture at session boundaries and measure each slice.

    The first settle_periods expected periods of every session are discarded
    as reaction time. Periods come from rising-edge intervals, duty from the
    high run within each cycle; both are means over complete cycles.
    """
    levels = decode_rle(capture.runs)
    interval = capture.sample_interval_us
    out = []
    for i, (sess, (start, end)) in enumerate(
        zip(sessions, _session_bounds(sessions, capture))
    ):
        settle = -(-config.settle_periods * sess.period_us * capture.rate_hz // 1_000_000)
        window = levels[min(start + settle, end):end]
        mean_level = float(window.mean()) if window.size else 0.0
        # A settle spike is one tick of wrong level, so it covers at most one
        # sample at any supported rate: merging 1-sample runs removes every
        # spike. Never merge above half the expected shortest phase, so a
        # legitimately fast wave sampled near its limit survives.
        min_len = max(1, min(2, _expected_min_phase_samples(sess, capture.rate_hz) // 2))
        runs = _deglitch(_runs_of(window), min_len)
        rises = _rising_edges(runs)
        cycle_count = max(0, len(rises) - 1)
        if cycle_count >= 2:
            periods = np.diff(np.array(rises, dtype=np.int64))
            high_by_offset = {}
            offset = 0
            for level, length in runs:
                if level == 1:
                    high_by_offset[offset] = length
                offset += length
            duties = [
                high_by_offset[rises[j]] / periods[j] for j in range(cycle_count)
            ]
            out.append(
                SessionMeasurement(
                    session_index=i,
                    mean_period_us=float(periods.mean()) * interval,
                    mean_duty=float(np.mean(duties)),
                    cycle_count=cycle_count,
                    settled=True,
                    mean_level=mean_level,
                )
            )
        else:
            out.append(
                SessionMeasurement(
                    session_index=i,
                    mean_period_us=None,
                    mean_duty=None,
                    cycle_count=cycle_count,
                    settled=False,
                    mean_level=mean_level,
                )
            )
    return PwmMeasurement(sessions=tuple(out))


def score_session(
    measured: SessionMeasurement,
    expected: Session,
    sample_interval_us: float,
    config: AnalysisConfig = DEFAULT_CONFIG,
) -> float:
    """Linear accuracy score in [0, 1] with a quantization deadband.

    score = max(0, 1 - max(0, e_p - q_p) - max(0, e_d - q_d)) where e_p is the
    relative period error, e_d the absolute duty error, and both deadbands are
    one sample interval relative to the expected period, so sampling
    quantization alone never costs points. Sessions expecting a constant level
    (duty 0 or 1) are scored on the fraction of samples at that level.
    """
    if expected.duty in (0.0, 1.0):
        frac = measured.mean_level if expected.duty == 1.0 else 1.0 - measured.mean_level
        return max(0.0, min(1.0, frac))
    if measured.mean_period_us is None or measured.mean_duty is None:
        return 0.0
    q = config.deadband_intervals * sample_interval_us / expected.period_us
    e_p = abs(measured.mean_period_us - expected.period_us) / expected.period_us
    e_d = abs(measured.mean_duty - expected.duty)
    return max(0.0, 1.0 - max(0.0, e_p - q) - max(0.0, e_d - q))


def classify_jitter(
    capture: SignalCapture, config: AnalysisConfig = DEFAULT_CONFIG
) -> JitterVerdict:
    """Tell hardware PWM from a software toggle loop via period stability.

    Works on the raw runs: software pin writes leave settle spikes that show
    up as extra edges, so per-cycle periods scatter, while the PWM peripheral
    is exact. Sharpest at one sample per tick; below 100 kHz the spikes are
    unresolvable and InsufficientResolution is raised. Meant for
    single-session high-resolution captures.
    """
    if capture.rate_hz < config.min_jitter_rate_hz:
        raise InsufficientResolution(
            f"rate {capture.rate_hz} Hz < {config.min_jitter_rate_hz} Hz"
        )
    interval = capture.sample_interval_us
    runs = [[level, length] for level, length in capture.runs]
    rises = _rising_edges(runs)
    if len(rises) < 2:
        return JitterVerdict("indeterminate", 0.0, ())
    periods = np.diff(np.array(rises, dtype=np.int64)) * interval
    median = float(np.median(periods))
    max_dev = float(np.max(np.abs(periods - median)))
    if len(periods) < config.min_cycles_for_verdict:
        return JitterVerdict("indeterminate", max_dev, tuple(float(p) for p in periods))
    std = float(np.std(periods))
    is_hw = (
        std <= config.hw_std_max_intervals * interval
        and max_dev <= config.hw_maxdev_intervals * interval
    )
    return JitterVerdict(
        "hardware_pwm" if is_hw else "software_pwm",
        max_dev,
        tuple(float(p) for p in periods),
    )
