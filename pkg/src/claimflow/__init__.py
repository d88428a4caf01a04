"""Rule-based smartphone damage-claim chatbot."""

__version__ = "0.1.0"
