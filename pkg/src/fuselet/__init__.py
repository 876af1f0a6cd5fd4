"""Self-supervised fire and smoke segmentation from multispectral rasters."""

__version__ = "0.1.0"
