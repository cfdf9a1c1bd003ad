"""Bird's-eye-view vehicle segmentation with surround state-space scanning."""
__version__ = "0.1.0"
