"""Hybrid CTC/attention speech recognition with InterCTC dialect identification."""

__version__ = "0.1.0"
