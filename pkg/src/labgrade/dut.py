"""Virtual microcontroller: a tiny deterministic DUT with a PWM peripheral.

The machine executes a small assembly language at a fixed clock rate.
Instruction effects become visible when the instruction finishes: one tick
after it starts for everything except WAIT/WAITI (max(1, value) ticks) and
PRINT (10 ticks per emitted byte, a 1 Mbps UART at the 1 MHz profile).

Two behaviours matter for grading:

- The PWM peripheral (PWMHW) drives its pin glitch-free from the tick after
  the instruction commits, and keeps running after HALT. Once a pin is
  claimed by the peripheral, software writes to it are ignored.
- Software pin writes (SET/CLR) carry a one-tick settle spike two ticks
  before the new level holds, the bounce a bit-banged GPIO shows on a fast
  scope. The spike is skipped when the pin changed less than three ticks
  earlier. This asymmetry is what lets the analysis side separate hardware
  PWM from software toggle loops with certainty.
"""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from typing import NamedTuple

MAX_SOURCE_BYTES = 64 * 1024
WORD_MASK = 0xFFFF
PRINT_TICKS_PER_BYTE = 10

# Settle spike on software pin writes: the new level blips in 2 ticks early,
# drops back for 1 tick, then holds.
_SPIKE_LEAD = 2


class CompileError(Exception):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line
        self.reason = message


class EngineFault(Exception):
    """Internal inconsistency in the simulated hardware; never caused by
    student code."""


@dataclass(frozen=True)
class DutProfile:
    id: str
    clock_hz: int
    pin_count: int

    def __post_init__(self) -> None:
        if self.clock_hz % 1_000_000 != 0:
            raise EngineFault("DUT clock must be a whole number of MHz")

    @property
    def ticks_per_us(self) -> int:
        return self.clock_hz // 1_000_000

    @property
    def pins(self) -> tuple[str, ...]:
        return tuple(f"P{i}" for i in range(self.pin_count))


PROFILES: dict[str, DutProfile] = {
    "dut-v1": DutProfile(id="dut-v1", clock_hz=1_000_000, pin_count=4),
    "dut-v2": DutProfile(id="dut-v2", clock_hz=2_000_000, pin_count=6),
}


def get_profile(profile_id: str) -> DutProfile:
    try:
        return PROFILES[profile_id]
    except KeyError:
        raise EngineFault(f"unknown DUT profile {profile_id!r}") from None


class Instr(NamedTuple):
    op: str
    args: tuple[int, ...]
    line: int


@dataclass(frozen=True)
class DutProgram:
    instructions: tuple[Instr, ...]
    source_sha256: str


class PortUpdate(NamedTuple):
    """Input port values that take effect at a given tick."""

    at_tick: int
    in0: int
    in1: int


_LABEL_RE = re.compile(r"^(\w+):")
_MNEMONICS_NO_ARGS = {"NOP", "HALT"}


def _reg(tok: str, line: int) -> int:
    m = re.fullmatch(r"[rR]([0-7])", tok)
    if not m:
        raise CompileError(f"expected register r0-r7, got {tok!r}", line)
    return int(m.group(1))


def _pin(tok: str, line: int) -> int:
    m = re.fullmatch(r"[pP]([0-7])", tok)
    if not m:
        raise CompileError(f"expected pin P0-P7, got {tok!r}", line)
    return int(m.group(1))


def _port(tok: str, line: int) -> int:
    m = re.fullmatch(r"[iI][nN]([01])", tok)
    if not m:
        raise CompileError(f"expected input port IN0 or IN1, got {tok!r}", line)
    return int(m.group(1))


def _imm(tok: str, line: int) -> int:
    try:
        value = int(tok)
    except ValueError:
        raise CompileError(f"expected integer immediate, got {tok!r}", line) from None
    if not 0 <= value <= WORD_MASK:
        raise CompileError(f"immediate {value} does not fit 16 bits", line)
    return value


def assemble(source: str) -> DutProgram:
    """Two-pass assembler. Raises CompileError with the offending line."""
    if len(source.encode()) > MAX_SOURCE_BYTES:
        raise CompileError("source exceeds 64 KiB", 0)

    labels: dict[str, int] = {}
    pending: list[tuple[int, str, list[str]]] = []  # (line_no, mnemonic, operands)

    for line_no, raw in enumerate(source.splitlines(), start=1):
        text = raw.split(";", 1)[0].strip()
        while True:
            m = _LABEL_RE.match(text)
            if not m:
                break
            label = m.group(1)
            if label in labels:
                raise CompileError(f"duplicate label {label!r}", line_no)
            labels[label] = len(pending)
            text = text[m.end():].strip()
        if not text:
            continue
        parts = text.split(None, 1)
        mnemonic = parts[0].upper()
        operands = [t.strip() for t in parts[1].split(",")] if len(parts) > 1 else []
        pending.append((line_no, mnemonic, operands))

    def want(n: int, ops: list[str], line: int, mnemonic: str) -> None:
        if len(ops) != n:
            raise CompileError(f"{mnemonic} takes {n} operand(s), got {len(ops)}", line)

    instructions: list[Instr] = []
    for line_no, op, ops in pending:
        if op in _MNEMONICS_NO_ARGS:
            want(0, ops, line_no, op)
            instructions.append(Instr(op, (), line_no))
        elif op == "LDI":
            want(2, ops, line_no, op)
            instructions.append(Instr(op, (_reg(ops[0], line_no), _imm(ops[1], line_no)), line_no))
        elif op == "MOV":
            want(2, ops, line_no, op)
            instructions.append(Instr(op, (_reg(ops[0], line_no), _reg(ops[1], line_no)), line_no))
        elif op in ("ADD", "SUB", "MUL", "DIV"):
            want(3, ops, line_no, op)
            args = tuple(_reg(t, line_no) for t in ops)
            instructions.append(Instr(op, args, line_no))
        elif op == "RDPORT":
            want(2, ops, line_no, op)
            instructions.append(Instr(op, (_reg(ops[0], line_no), _port(ops[1], line_no)), line_no))
        elif op in ("SET", "CLR"):
            want(1, ops, line_no, op)
            instructions.append(Instr(op, (_pin(ops[0], line_no),), line_no))
        elif op == "WAITI":
            want(1, ops, line_no, op)
            instructions.append(Instr(op, (_imm(ops[0], line_no),), line_no))
        elif op == "WAIT":
            want(1, ops, line_no, op)
            instructions.append(Instr(op, (_reg(ops[0], line_no),), line_no))
        elif op in ("JMP", "BEQ", "BNE", "BLT"):
            n = 1 if op == "JMP" else 3
            want(n, ops, line_no, op)
            target = ops[-1]
            if target not in labels:
                raise CompileError(f"unknown label {target!r}", line_no)
            regs = tuple(_reg(t, line_no) for t in ops[:-1])
            instructions.append(Instr(op, regs + (labels[target],), line_no))
        elif op == "PWMHW":
            want(3, ops, line_no, op)
            instructions.append(
                Instr(
                    op,
                    (_pin(ops[0], line_no), _reg(ops[1], line_no), _reg(ops[2], line_no)),
                    line_no,
                )
            )
        elif op == "PRINT":
            want(1, ops, line_no, op)
            instructions.append(Instr(op, (_reg(ops[0], line_no),), line_no))
        else:
            raise CompileError(f"unknown instruction {op!r}", line_no)

    digest = hashlib.sha256(source.encode()).hexdigest()
    return DutProgram(instructions=tuple(instructions), source_sha256=digest)


BLANK_PROGRAM = assemble("HALT\n")


@dataclass(frozen=True)
class DutTrace:
    """Per-pin logical transition events plus the UART print log.

    ``pin_events[pin]`` is a tuple of (tick, level) changes; the level before
    the first event is 0. Ticks are native clock ticks in [0, duration_ticks).
    """

    profile: DutProfile
    duration_us: int
    duration_ticks: int
    pin_events: dict[str, tuple[tuple[int, int], ...]]
    print_log: bytes
    print_ticks: tuple[int, ...]
    instructions_executed: int
    halted: bool


class _PwmSegment(NamedTuple):
    origin: int
    period: int
    high: int


def run_program(
    program: DutProgram,
    profile: DutProfile,
    port_schedule: tuple[PortUpdate, ...],
    duration_us: int,
) -> DutTrace:
    """Execute the program for duration_us of simulated time.

    The port schedule must be sorted by tick; values before the first entry
    read as 0. Execution is fully deterministic: same inputs, same trace.
    """
    duration_ticks = duration_us * profile.ticks_per_us
    schedule = sorted(port_schedule, key=lambda u: u.at_tick)
    for u in schedule:
        if not (0 <= u.in0 <= WORD_MASK and 0 <= u.in1 <= WORD_MASK):
            raise EngineFault(f"port values must fit 16 bits: {u}")

    regs = [0] * 8
    pc = 0
    tick = 0
    halted = False
    executed = 0
    port_idx = 0
    ports = [0, 0]

    n_pins = profile.pin_count
    sw_level = [0] * n_pins
    sw_events: list[list[tuple[int, int]]] = [[] for _ in range(n_pins)]
    pwm_segments: list[list[_PwmSegment]] = [[] for _ in range(n_pins)]
    print_bytes = bytearray()
    print_ticks: list[int] = []

    code = program.instructions
    n_code = len(code)

    while not halted and pc < n_code and tick < duration_ticks:
        while port_idx < len(schedule) and schedule[port_idx].at_tick <= tick:
            ports[0] = schedule[port_idx].in0
            ports[1] = schedule[port_idx].in1
            port_idx += 1

        op, args, _ = code[pc]
        cost = 1
        next_pc = pc + 1

        if op == "LDI":
            regs[args[0]] = args[1]
        elif op == "MOV":
            regs[args[0]] = regs[args[1]]
        elif op == "ADD":
            regs[args[0]] = (regs[args[1]] + regs[args[2]]) & WORD_MASK
        elif op == "SUB":
            regs[args[0]] = (regs[args[1]] - regs[args[2]]) & WORD_MASK
        elif op == "MUL":
            regs[args[0]] = (regs[args[1]] * regs[args[2]]) & WORD_MASK
        elif op == "DIV":
            d = regs[args[2]]
            regs[args[0]] = (regs[args[1]] // d) if d else 0
        elif op == "RDPORT":
            regs[args[0]] = ports[args[1]]
        elif op in ("SET", "CLR"):
            pin = args[0]
            if pin < n_pins and not pwm_segments[pin]:
                level = 1 if op == "SET" else 0
                commit = tick + 1
                if level != sw_level[pin]:
                    sw_level[pin] = level
                    sw_events[pin].append((commit, level))
        elif op == "WAITI":
            cost = max(1, args[0])
        elif op == "WAIT":
            cost = max(1, regs[args[0]])
        elif op == "JMP":
            next_pc = args[0]
        elif op == "BEQ":
            if regs[args[0]] == regs[args[1]]:
                next_pc = args[2]
        elif op == "BNE":
            if regs[args[0]] != regs[args[1]]:
                next_pc = args[2]
        elif op == "BLT":
            if regs[args[0]] < regs[args[1]]:
                next_pc = args[2]
        elif op == "PWMHW":
            pin, r_period, r_duty = args
            if pin < n_pins:
                period = regs[r_period]
                high = min(period, period * regs[r_duty] // 100)
                pwm_segments[pin].append(_PwmSegment(origin=tick + 1, period=period, high=high))
        elif op == "PRINT":
            text = (str(regs[args[0]]) + "\n").encode("ascii")
            cost = PRINT_TICKS_PER_BYTE * len(text)
            for i, b in enumerate(text, start=1):
                emit = tick + PRINT_TICKS_PER_BYTE * i
                if emit < duration_ticks:
                    print_bytes.append(b)
                    print_ticks.append(emit)
        elif op == "NOP":
            pass
        elif op == "HALT":
            halted = True
        else:  # pragma: no cover - assembler rejects unknown ops
            raise EngineFault(f"undecodable instruction {op}")

        tick += cost
        pc = next_pc
        executed += 1

    pin_events = {
        profile.pins[p]: _build_pin_events(sw_events[p], pwm_segments[p], duration_ticks)
        for p in range(n_pins)
    }
    return DutTrace(
        profile=profile,
        duration_us=duration_us,
        duration_ticks=duration_ticks,
        pin_events=pin_events,
        print_log=bytes(print_bytes),
        print_ticks=tuple(print_ticks),
        instructions_executed=executed,
        halted=halted,
    )


def _pwm_transitions(
    seg: _PwmSegment, end: int, level_before: int
) -> list[tuple[int, int]]:
    """Level changes produced by one peripheral segment over [origin, end)."""
    out: list[tuple[int, int]] = []
    if seg.period <= 0 or seg.high <= 0:
        if level_before != 0:
            out.append((seg.origin, 0))
        return out
    if seg.high >= seg.period:
        if level_before != 1:
            out.append((seg.origin, 1))
        return out
    level = level_before
    t = seg.origin
    while t < end:
        if level != 1:
            out.append((t, 1))
            level = 1
        fall = t + seg.high
        if fall >= end:
            break
        out.append((fall, 0))
        level = 0
        t += seg.period
    return out


def _build_pin_events(
    sw: list[tuple[int, int]],
    segments: list[_PwmSegment],
    duration_ticks: int,
) -> tuple[tuple[int, int], ...]:
    """Combine software and peripheral transitions, then add settle spikes.

    Software events all precede the first peripheral segment: the interpreter
    drops writes to a claimed pin, and commit ticks grow monotonically.
    """
    logical: list[tuple[int, int, bool]] = []  # (tick, level, software?)
    level = 0
    for t, v in sw:
        if v != level:
            logical.append((t, v, True))
            level = v
    for i, seg in enumerate(segments):
        end = segments[i + 1].origin if i + 1 < len(segments) else duration_ticks
        for t, v in _pwm_transitions(seg, end, level):
            logical.append((t, v, False))
            level = v

    out: list[tuple[int, int]] = []
    prev_tick = 0
    for t, v, is_sw in logical:
        if t >= duration_ticks:
            break
        if is_sw and t - prev_tick > _SPIKE_LEAD:
            out.append((t - 2, v))
            out.append((t - 1, 1 - v))
        out.append((t, v))
        prev_tick = t
    return tuple(out)
