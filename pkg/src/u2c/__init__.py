"""Post-hoc unified uncertainty calibration."""

__version__ = "0.1.0"
