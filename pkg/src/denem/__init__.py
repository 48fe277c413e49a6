"""Diverse-ensemble training and episodic test-time adaptation for grouped patch classification."""
__version__ = "0.1.0"
