"""Collaborative filtering kernels, implicit bias and exposure-corrected evaluation."""
__version__ = "0.1.0"
