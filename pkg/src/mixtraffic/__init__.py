"""Mixed-autonomy traffic laboratory."""
__version__ = "0.1.0"
