"""Simulator and verification harness for machine-mode compartment isolation
on RISC-V, built around an enhanced-PMP privilege split and a one-way
SallyPort exit door between the security monitor and platform firmware."""

__version__ = "0.1.0"
