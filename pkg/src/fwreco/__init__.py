"""Firewall white-list recommendation from flow records."""

__version__ = "0.1.0"
