"""pano4d: desk-scale multimodal 4D panoptic segmentation and tracking."""

__version__ = "0.1.0"
