"""Static x86 rewriting with trace-driven taint propagation analysis."""

__version__ = "0.1.0"
