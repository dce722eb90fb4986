"""Offline RL toolkit for notification send decisions."""
__version__ = "0.1.0"
