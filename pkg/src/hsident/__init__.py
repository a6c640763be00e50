"""Pixel-wise individual identification from hyperspectral cubes.

Cube I/O, box-filter denoising, full-spectrum / PCA / sRGB representations,
a numpy MLP trained with Adam and step decay, evaluation and figure output,
plus a synthetic scene generator for desk-scale checks.
"""

from .errors import ConfigError, DataError, HsidentError, NumericalError
from .hscube import AnnotationSet, BandImage, Box, HsCube, extract_band, read_annotations, read_cube, write_annotations, write_cube

__version__ = "0.1.0"

__all__ = [
    "AnnotationSet",
    "BandImage",
    "Box",
    "ConfigError",
    "DataError",
    "HsCube",
    "HsidentError",
    "NumericalError",
    "extract_band",
    "read_annotations",
    "read_cube",
    "write_annotations",
    "write_cube",
]
