"""Calibration, freehand US compounding, US/MRI and US/US registration, and
accuracy evaluation for a tracked-ultrasound surgical navigation chain."""

__version__ = "0.1.0"
