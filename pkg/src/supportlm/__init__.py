"""Support-sample analysis of next-token prediction in a small transformer LM."""

__version__ = "0.1.0"
