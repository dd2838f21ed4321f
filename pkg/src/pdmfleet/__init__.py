"""Ring-oscillator fleet degradation self-test toolkit."""

__version__ = "0.1.0"
