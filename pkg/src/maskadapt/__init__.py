"""MaskAdapt: RGB-D domain-adaptive crop/weed segmentation at desk scale."""
__version__ = "0.1.0"
