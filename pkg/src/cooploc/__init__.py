"""Cooperative vehicular localization with learned message passing."""

__version__ = "0.1.0"
