"""Protocol-compliance verification for message-passing device drivers."""

__version__ = "0.1.0"
