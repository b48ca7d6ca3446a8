"""Edge-aware unpaired translation of synthetic stereo pairs into a real domain."""

__version__ = "0.1.0"
