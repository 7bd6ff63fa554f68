"""Proof-of-learning creation, verification, and adversarial-example spoofing."""

__version__ = "0.1.0"
