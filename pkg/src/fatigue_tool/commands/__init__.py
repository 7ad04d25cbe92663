"""CLI commands."""

from fatigue_tool.commands import ablate, data, inspect, train, viz

__all__ = ["ablate", "data", "inspect", "train", "viz"]
