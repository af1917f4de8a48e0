"""Self-adapting swarm formation control with provenance-backed program synthesis."""

__version__ = "0.1.0"
