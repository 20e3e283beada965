"""Planar OU first-exit simulation, circular density estimation and staged splitting."""
