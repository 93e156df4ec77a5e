"""Hybrid quantum-classical graph neural networks for doublet classification in particle tracking."""

__version__ = "0.1.0"
