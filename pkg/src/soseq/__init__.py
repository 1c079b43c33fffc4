"""Resilient control-system toolkit: jump-linear physics, security games,
IT-OT co-learning, resilience metrics, and cascade networks."""

__version__ = "0.1.0"
