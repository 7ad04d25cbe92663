"""Test suite for fatigue-tool."""
