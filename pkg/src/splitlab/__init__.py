"""Multilevel splitting for rare-event probabilities on partitioned thresholds."""

__version__ = "0.1.0"
