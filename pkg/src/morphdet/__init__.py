"""Prototype-based few-shot detection.

A feature-embedding network is trained jointly with per-class prototype
vectors by alternating SGD on the network with prototype refits from class
mean features. Once trained, the detector is "morphed" to cover novel classes
by inserting new prototypes computed from a handful of exemplar features --
forward passes only, no gradient steps, base classes untouched.
"""

__version__ = "0.1.0"
