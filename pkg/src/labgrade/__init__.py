"""Autograder for embedded-systems assignments on simulated hardware testbeds.

The package is organised around the path a submission takes:

- ``dut``: a deterministic virtual microcontroller that runs student programs.
- ``engine``: drives the DUT, samples an output pin, and produces run-length
  encoded captures plus the on-disk artifact formats.
- ``analysis``: turns captures into per-session PWM measurements, scores them,
  and classifies period jitter as hardware- or software-generated.
- ``grading``: builds grade reports, either with the builtin PWM grader or by
  delegating to an instructor-supplied script.
- ``coordinator``: a small HTTP service wrapping one virtual testbed.
- ``server`` / ``scheduler`` / ``store``: the grading server, its dispatch
  workers, and the sqlite-backed state they share.
- ``bench``: a load-generation CLI for latency and throughput measurements.
"""

__version__ = "0.1.0"
