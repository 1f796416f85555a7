"""Sequential-recommendation engine built on gated rotary-enhanced linear attention."""

__version__ = "0.1.0"
