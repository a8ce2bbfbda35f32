"""Anonymous, service-agnostic edge offloading: puzzles, blind tokens, parties and harnesses."""

__version__ = "0.1.0"
