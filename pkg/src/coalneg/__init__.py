"""Two-party coalition negotiation simulator with LLM agents."""

__version__ = "0.1.0"
