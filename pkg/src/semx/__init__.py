"""Semantic-communication-assisted vehicle trajectory prediction (V2I / V2V) simulator."""

__version__ = "0.1.0"
