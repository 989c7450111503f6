"""Device-free tracking from the time and frequency content of link RSS."""

__version__ = "0.1.0"
