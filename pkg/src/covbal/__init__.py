"""Multi-arm randomization with unequal allocation ratios and unobserved-covariate balance diagnostics."""

__version__ = "0.1.0"
