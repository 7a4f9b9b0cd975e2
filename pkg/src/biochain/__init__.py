"""Tamper-evident biometric identification: a hash-linked feature
extraction chain with a notarized query protocol, and a consensus-backed
template matching tree with tamper localization and self-correction."""

__version__ = "0.1.0"
