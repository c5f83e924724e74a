"""Scene coordinate regression relocalization."""
__version__ = "0.1.0"
