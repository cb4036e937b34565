"""Joint denoising and raster-scan distortion correction of image series.

Three reconstruction methods are provided: iterative non-rigid registration
(``nrr``), its bias-corrected variant (``nrrplus``) and a joint fit of a
spline image model, rigid drift and scanline shifts (``jud``).
"""

from .core import ImageSeries, PixelImage, load_image, load_series, save_image, save_series
from .evaluate import PrecisionReport, fit_atoms, precision, relative_error_map, split_protocol_eval
from .pipeline import LossConfig, ReconstructionResult, reconstruct
from .synth import SynthConfig, generate_series

__version__ = "0.1.0"

__all__ = [
    "ImageSeries", "PixelImage", "load_image", "load_series", "save_image", "save_series",
    "PrecisionReport", "fit_atoms", "precision", "relative_error_map", "split_protocol_eval",
    "LossConfig", "ReconstructionResult", "reconstruct", "SynthConfig", "generate_series",
]
