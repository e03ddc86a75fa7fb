"""Many-to-many voice conversion with weight-adaptive instance normalization."""
__version__ = "0.1.0"
