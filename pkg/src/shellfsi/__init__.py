"""Fluid-shell interaction solver on Hanzawa-transformed reference domains."""
