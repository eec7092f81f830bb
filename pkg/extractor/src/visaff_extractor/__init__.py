"""Feature extraction companion package for the visaff engine."""

from .pipeline import ExtractionJob, ExtractionReport, run_extraction
from .tiling import load_image, reassemble, tile_image

__version__ = "0.1.0"
