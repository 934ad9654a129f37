"""Accelerated evaluation of rare events: piecewise mixture models, cross-entropy IS and a cut-in scenario."""

__version__ = "0.1.0"
