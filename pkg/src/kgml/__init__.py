"""Knowledge-graph-enhanced meta-learning for few-shot text classification."""

__version__ = "0.1.0"
