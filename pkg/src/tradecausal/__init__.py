"""Classification, attribution, decorrelation and causal-forest pipeline for insider-trading data."""

__version__ = "0.1.0"
