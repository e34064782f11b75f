"""Simulator for communication-efficient federated knowledge graph embedding."""

__version__ = "0.1.0"
