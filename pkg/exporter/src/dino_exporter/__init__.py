"""Export patch descriptors and attention planes to DVKEMB01 grid files."""

__version__ = "0.1.0"
