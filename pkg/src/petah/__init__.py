"""Parameter-efficient task adaptation for hybrid conv/attention networks."""

__version__ = "0.1.0"
