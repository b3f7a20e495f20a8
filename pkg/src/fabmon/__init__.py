"""fabmon: fabric monitoring toolkit (agents, archive, directory, probes)."""

__version__ = "0.1.0"
