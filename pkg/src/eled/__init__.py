"""Event-guided low-light video enhancement and deblurring."""

__version__ = "0.1.0"
