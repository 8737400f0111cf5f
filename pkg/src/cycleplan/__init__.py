"""Two-layer time-optimal trajectory planning around ball obstacles."""

__version__ = "0.1.0"
