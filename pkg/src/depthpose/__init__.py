"""Head and shoulder pose estimation from depth frames."""

__version__ = "0.1.0"
