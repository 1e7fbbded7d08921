"""Deformable line attention lab: operator, gradient oracles, kernel fusion,
a toy line detector and a structural-AP evaluation harness."""

__version__ = "0.1.0"
