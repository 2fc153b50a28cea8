"""cupmem: a current-state user memory engine with write-time adjudication."""

__version__ = "0.1.0"
