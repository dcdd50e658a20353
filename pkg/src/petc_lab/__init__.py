"""Periodic event-triggered control: certification, simulation and verification."""

__version__ = "0.1.0"
