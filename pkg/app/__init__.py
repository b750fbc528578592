"""Friction-stir-weld microstructure CNN toolkit."""
