"""Multi-lead ECG classification and domain-generalization evaluation."""

__version__ = "0.1.0"
