"""Closed-loop cooperative-driving simulator with object-level V2V fusion."""

__version__ = "0.1.0"
