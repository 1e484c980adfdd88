"""Second-order statistics optimization (S2O) lab for adversarial training."""

__version__ = "0.1.0"
