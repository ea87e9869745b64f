"""Joint compressed-sensing MRI reconstruction and segmentation."""

__version__ = "0.1.0"
