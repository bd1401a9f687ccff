"""Cross-domain aspect-transfer recommender for cold-start users."""

__version__ = "0.1.0"
