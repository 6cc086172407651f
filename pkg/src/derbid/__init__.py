"""Day-ahead bidding for a price-maker DER aggregator with DSO security checks."""

__version__ = "0.1.0"
