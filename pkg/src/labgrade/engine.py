"""Simulated hardware engine: stimulates the DUT, samples a pin, encodes RLE.

The engine owns the artifact file formats:

- Capture file (``capture.rle``): line 1 carries the header values
  ``rate_hz,duration_us,pin,profile``; each following line is
  ``level,run_length`` with level 0 or 1. UTF-8, LF line endings.
- Session schedule (``schedule.csv``): header ``start_us,period_us,duty_pct``
  then one row per session, duty in whole percent.
- Port schedule: header ``tick_us,in0,in1`` then one row per port update.

Sampling is sample-and-hold: the sample at instant k*10^6/rate microseconds
takes the pin level at or immediately before that instant. This makes
point-downsampling a high-rate capture bit-identical to capturing at the low
rate directly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dut import DutProgram, DutProfile, DutTrace, PortUpdate, run_program
from .model import CaptureConfig, Session

Runs = tuple[tuple[int, int], ...]


class MalformedCapture(Exception):
    pass


class ConfigMismatch(Exception):
    pass


@dataclass(frozen=True)
class SignalCapture:
    """Run-length encoded samples of one pin."""

    rate_hz: int
    duration_us: int
    pin: str
    profile_id: str
    runs: Runs

    @property
    def sample_count(self) -> int:
        return self.duration_us * self.rate_hz // 1_000_000

    @property
    def sample_interval_us(self) -> float:
        return 1_000_000 / self.rate_hz

    @property
    def transition_count(self) -> int:
        return max(0, len(self.runs) - 1)


def encode_rle(levels: np.ndarray) -> Runs:
    """Compress a 0/1 sample sequence into alternating (level, length) runs."""
    arr = np.asarray(levels, dtype=np.uint8)
    if arr.size == 0:
        raise MalformedCapture("cannot encode an empty sample sequence")
    boundaries = np.flatnonzero(np.diff(arr)) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [arr.size]))
    return tuple((int(arr[s]), int(e - s)) for s, e in zip(starts, ends))


def decode_rle(runs: Runs) -> np.ndarray:
    """Expand runs back into the sample sequence; validates the invariants."""
    if not runs:
        raise MalformedCapture("no runs")
    levels = []
    lengths = []
    prev = None
    for level, length in runs:
        if level not in (0, 1):
            raise MalformedCapture(f"level must be 0 or 1, got {level}")
        if length < 1:
            raise MalformedCapture(f"run length must be >= 1, got {length}")
        if prev is not None and level == prev:
            raise MalformedCapture("adjacent runs must alternate level")
        prev = level
        levels.append(level)
        lengths.append(length)
    return np.repeat(np.array(levels, dtype=np.uint8), lengths)


def sample_pin(trace: DutTrace, cfg: CaptureConfig) -> np.ndarray:
    """Sample one pin of a finished trace at the configured rate."""
    if cfg.pin not in trace.pin_events:
        raise ConfigMismatch(
            f"pin {cfg.pin} not present on profile {trace.profile.id}"
        )
    if cfg.duration_us > trace.duration_us:
        raise ConfigMismatch("capture window longer than the executed trace")
    n = cfg.sample_count
    clock = trace.profile.clock_hz
    # Instant of sample k is k*1e6/rate us = k*clock/rate ticks; floor gives
    # the at-or-immediately-before tick.
    sample_ticks = (np.arange(n, dtype=np.int64) * clock) // cfg.rate_hz
    events = trace.pin_events[cfg.pin]
    if not events:
        return np.zeros(n, dtype=np.uint8)
    ev_ticks = np.array([t for t, _ in events], dtype=np.int64)
    ev_levels = np.array([v for _, v in events], dtype=np.uint8)
    idx = np.searchsorted(ev_ticks, sample_ticks, side="right") - 1
    return np.where(idx >= 0, ev_levels[np.maximum(idx, 0)], 0).astype(np.uint8)


def port_schedule_for_sessions(
    sessions: tuple[Session, ...], profile: DutProfile
) -> tuple[PortUpdate, ...]:
    """Translate the session schedule into input-port updates.

    IN0 carries the period in microseconds, IN1 the duty in whole percent;
    both ports are 16-bit, which bounds representable periods at 65535 us.
    """
    updates = []
    for s in sessions:
        if s.period_us > 0xFFFF:
            raise ConfigMismatch(f"period {s.period_us} us does not fit a 16-bit port")
        updates.append(
            PortUpdate(
                at_tick=s.start_us * profile.ticks_per_us,
                in0=s.period_us,
                in1=s.duty_pct,
            )
        )
    return tuple(updates)


def capture(
    program: DutProgram,
    sessions: tuple[Session, ...],
    cfg: CaptureConfig,
    profile: DutProfile,
) -> tuple[SignalCapture, bytes]:
    """Run the program against the session stimulus and sample the pin.

    The DUT starts from the all-zero reset state every time. Returns the
    RLE capture plus the UART print log.
    """
    schedule = port_schedule_for_sessions(sessions, profile)
    trace = run_program(program, profile, schedule, cfg.duration_us)
    levels = sample_pin(trace, cfg)
    cap = SignalCapture(
        rate_hz=cfg.rate_hz,
        duration_us=cfg.duration_us,
        pin=cfg.pin,
        profile_id=profile.id,
        runs=encode_rle(levels),
    )
    return cap, trace.print_log


# --- file formats -----------------------------------------------------------


def write_capture(cap: SignalCapture) -> str:
    lines = [f"{cap.rate_hz},{cap.duration_us},{cap.pin},{cap.profile_id}"]
    lines.extend(f"{level},{length}" for level, length in cap.runs)
    return "\n".join(lines) + "\n"


def read_capture(text: str) -> SignalCapture:
    lines = [ln for ln in text.split("\n") if ln.strip()]
    if not lines:
        raise MalformedCapture("empty capture file")
    head = lines[0].split(",")
    if len(head) != 4:
        raise MalformedCapture(f"bad capture header {lines[0]!r}")
    try:
        rate_hz = int(head[0])
        duration_us = int(head[1])
    except ValueError as e:
        raise MalformedCapture(f"bad capture header {lines[0]!r}") from e
    runs = []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != 2:
            raise MalformedCapture(f"bad run line {ln!r}")
        try:
            runs.append((int(parts[0]), int(parts[1])))
        except ValueError as e:
            raise MalformedCapture(f"bad run line {ln!r}") from e
    cap = SignalCapture(
        rate_hz=rate_hz,
        duration_us=duration_us,
        pin=head[2],
        profile_id=head[3],
        runs=tuple(runs),
    )
    decoded = decode_rle(cap.runs)  # validates alternation and lengths
    if decoded.size != cap.sample_count:
        raise MalformedCapture(
            f"runs cover {decoded.size} samples, header implies {cap.sample_count}"
        )
    return cap


def write_schedule(sessions: tuple[Session, ...]) -> str:
    lines = ["start_us,period_us,duty_pct"]
    lines.extend(f"{s.start_us},{s.period_us},{s.duty_pct}" for s in sessions)
    return "\n".join(lines) + "\n"


def read_schedule(text: str) -> tuple[Session, ...]:
    lines = [ln for ln in text.split("\n") if ln.strip()]
    if not lines or lines[0] != "start_us,period_us,duty_pct":
        raise MalformedCapture("bad schedule header")
    sessions = []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != 3:
            raise MalformedCapture(f"bad schedule row {ln!r}")
        start, period, duty_pct = (int(p) for p in parts)
        sessions.append(Session(start_us=start, period_us=period, duty=duty_pct / 100))
    return tuple(sessions)


def write_port_schedule(updates: tuple[PortUpdate, ...], profile: DutProfile) -> str:
    lines = ["tick_us,in0,in1"]
    tpu = profile.ticks_per_us
    lines.extend(f"{u.at_tick // tpu},{u.in0},{u.in1}" for u in updates)
    return "\n".join(lines) + "\n"


def read_port_schedule(text: str, profile: DutProfile) -> tuple[PortUpdate, ...]:
    lines = [ln for ln in text.split("\n") if ln.strip()]
    if not lines or lines[0] != "tick_us,in0,in1":
        raise MalformedCapture("bad port schedule header")
    out = []
    for ln in lines[1:]:
        parts = [int(p) for p in ln.split(",")]
        if len(parts) != 3:
            raise MalformedCapture(f"bad port schedule row {ln!r}")
        out.append(PortUpdate(parts[0] * profile.ticks_per_us, parts[1], parts[2]))
    return tuple(out)
