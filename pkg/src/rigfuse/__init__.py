"""Self-calibrating multi-camera depth fusion."""

__version__ = "0.1.0"
