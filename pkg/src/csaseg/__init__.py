"""Cross-scale attention U-Net with surface supervision for 3D bone segmentation."""
__version__ = "0.1.0"
