"""Ray-traced marker occlusion synthesis and an occlusion-robust MoCap solver."""

__version__ = "0.1.0"
