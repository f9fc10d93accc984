"""Intrusion-tolerant content server with hash-verified replicas."""

__version__ = "0.1.0"
