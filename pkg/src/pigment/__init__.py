"""Image enhancement through a learned pigment representation.

RGB colors are expanded into ``N`` pigments, each pigment is remapped by
its own piecewise-linear curve, pigments are mixed by a small per-pixel
network and projected back to RGB.  A visual encoder predicts all of these
parameters from a downsampled copy of the input image.
"""

from .encoder import EncoderConfig, enhance_image, identity_encoder, init_encoder
from .pipeline import BlendParams, PigmentModelParams, apply_pipeline_image

__version__ = "0.1.0"

__all__ = [
    "BlendParams",
    "EncoderConfig",
    "PigmentModelParams",
    "apply_pipeline_image",
    "enhance_image",
    "identity_encoder",
    "init_encoder",
]
