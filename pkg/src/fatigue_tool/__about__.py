"""Version information for fatigue-tool."""

__version__ = "0.1.0"
