"""Super-resolution ultrasound localization pipeline: synthetic microbubble
simulation, SVD clutter filtering, subpixel detection network, SRUS image
formation and evaluation."""

__version__ = "0.1.0"
