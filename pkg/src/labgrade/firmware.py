"""Reference DUT programs used by tests, demos and the benchmark.

All programs read the stimulus ports: IN0 carries the requested period in
microseconds, IN1 the duty in whole percent. At the 1 MHz profile one tick
is one microsecond, so port values can be used as tick counts directly.
"""
from __future__ import annotations

# Arms the PWM peripheral, then watches the ports and re-arms whenever the
# requested period or duty changes. Never halts, so the wave keeps running.
HARDWARE_PWM = """\
; hardware PWM with session tracking
init:   RDPORT r0, IN0      ; period (us = ticks at 1 MHz)
        RDPORT r1, IN1      ; duty (percent)
        PWMHW P0, r0, r1
watch:  RDPORT r2, IN0
        RDPORT r3, IN1
        BNE r2, r0, init
        BNE r3, r1, init
        JMP watch
"""

# Same idea for the 2 MHz profile: port values are microseconds, so the
# period doubles to become ticks. Drives P4, which only dut-v2 has.
HARDWARE_PWM_V2 = """\
; hardware PWM for the 2 MHz / 6-pin profile
init:   RDPORT r0, IN0
        RDPORT r1, IN1
        ADD r2, r0, r0      ; us -> ticks at 2 MHz
        PWMHW P4, r2, r1
watch:  RDPORT r4, IN0
        RDPORT r5, IN1
        BNE r4, r0, init
        BNE r5, r1, init
        JMP watch
"""

# Bit-banged PWM: seven non-WAIT instructions per iteration, so each cycle
# runs 7 ticks longer than requested. Duty is latched once at startup; the
# period is re-read every cycle.
SOFTWARE_PWM = """\
; software PWM busy loop
        LDI r3, 100
        RDPORT r1, IN1      ; duty (percent), latched
loop:   RDPORT r0, IN0      ; period (us = ticks at 1 MHz)
        MUL r2, r0, r1
        DIV r2, r2, r3      ; high ticks
        SUB r4, r0, r2      ; low ticks
        SET P0
        WAIT r2
        CLR P0
        WAIT r4
        JMP loop
"""

# Halts immediately; every pin stays low.
BLANK = "HALT\n"

# Correct period but half the requested duty; scores partial credit.
BUGGY_HALF_DUTY = """\
; buggy: halves the duty
        RDPORT r0, IN0
        RDPORT r1, IN1
        LDI r2, 2
        DIV r1, r1, r2
        PWMHW P0, r0, r1
        HALT
"""

# Drives the wrong pin, so the graded pin never toggles and scores zero.
BUGGY_WRONG_PIN = """\
; buggy: output on P1 instead of P0
        RDPORT r0, IN0
        RDPORT r1, IN1
        PWMHW P1, r0, r1
        HALT
"""

# Floods the UART as fast as the 10-ticks-per-byte model allows.
PRINT_SPAM = """\
; print the period port value forever
loop:   RDPORT r0, IN0
        PRINT r0
        JMP loop
"""

# Does not assemble: unknown mnemonic.
SYNTAX_ERROR = """\
        LDI r0, 1000
        BLINK P0
"""
