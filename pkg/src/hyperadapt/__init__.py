"""Desk-scale non-autoregressive TTS with hypernetwork-generated speaker adapters."""

__version__ = "0.1.0"
