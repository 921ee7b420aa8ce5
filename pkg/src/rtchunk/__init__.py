"""Real-time action chunking with flow-matching policies on a toy control task."""

__version__ = "0.1.0"
