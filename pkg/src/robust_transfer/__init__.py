"""Desk-scale lab for adversarial training, block-frozen transfer learning
and influence-function analysis on small residual networks."""

__version__ = "0.1.0"
