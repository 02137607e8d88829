"""Flow-window transformer for binary DDoS detection on NetFlow records."""

__version__ = "0.1.0"
