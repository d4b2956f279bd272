"""Library-only tour: run a program on the virtual DUT and analyze its pin.

No server involved. Assembles the two reference PWM implementations, captures
P0 at full rate, prints what the measurement pass sees, how it scores, and
what the jitter classifier concludes about each.
"""
from __future__ import annotations

from labgrade import analysis, engine, firmware
from labgrade.dut import assemble, get_profile
from labgrade.model import CaptureConfig, Session

PROFILE = get_profile("dut-v1")
CAPTURE = CaptureConfig(rate_hz=1_000_000, duration_us=12_000, pin="P0")
SESSION = Session(start_us=0, period_us=1000, duty=0.25)


def inspect(label: str, source: str) -> None:
    cap, print_log = engine.capture(assemble(source), (SESSION,), CAPTURE, PROFILE)
    measured = analysis.measure_pwm(cap, (SESSION,)).sessions[0]
    score = analysis.score_session(measured, SESSION, cap.sample_interval_us)
    verdict = analysis.classify_jitter(cap)
    print(f"{label}:")
    print(f"  runs in capture:   {len(cap.runs)} (RLE over {cap.sample_count} samples)")
    print(f"  measured period:   {measured.mean_period_us} us (expected {SESSION.period_us})")
    print(f"  measured duty:     {measured.mean_duty} (expected {SESSION.duty})")
    print(f"  cycles analyzed:   {measured.cycle_count}")
    print(f"  session score:     {score:.4f}")
    print(f"  jitter verdict:    {verdict.verdict} (max deviation {verdict.max_deviation_us:.1f} us)")
    if print_log:
        print(f"  print log:         {print_log[:40]!r}")
    print()


def main() -> None:
    inspect("hardware PWM peripheral", firmware.HARDWARE_PWM)
    inspect("software busy loop", firmware.SOFTWARE_PWM)

    # the codec the testbeds ship captures in
    levels = engine.decode_rle(
        engine.capture(assemble(firmware.SOFTWARE_PWM), (SESSION,), CAPTURE, PROFILE)[0].runs
    )
    runs = engine.encode_rle(levels)
    print(f"codec round trip: {levels.size} samples -> {len(runs)} runs -> identical:",
          bool((engine.decode_rle(runs) == levels).all()))


if __name__ == "__main__":
    main()
