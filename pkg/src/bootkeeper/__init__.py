"""Static validation of measured-boot integrity properties on firmware images."""

__version__ = "0.1.0"
