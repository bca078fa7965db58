"""Co-matching: learning with noisy labels by matching a weakly and a
strongly augmented view across two networks."""

__version__ = "0.1.0"
