"""Desk-scale video toonification by teacher distillation.

A toy style-based generator pair (source domain / toon domain) is distilled
into a fully convolutional encoder-generator that accepts unaligned frames of
variable size, supports exemplar and style-degree control, and suppresses
temporal flicker without optical flow at inference.
"""

from .teacher import (
    GeneratorConfig,
    StyleCode,
    EditDirection,
    TeacherBundle,
    build_toy_teacher,
    synthesize,
    synthesize_exemplar,
    embed,
    mid_feature,
    mix_codes,
)
from .encoder import ContentEncoder, EncoderConfig, ContentFeaturePyramid
from .fusion import FusionSite, initialize_fusion
from .model import VidToonModel, assemble, output_size

__all__ = [
    "GeneratorConfig",
    "StyleCode",
    "EditDirection",
    "TeacherBundle",
    "build_toy_teacher",
    "synthesize",
    "synthesize_exemplar",
    "embed",
    "mid_feature",
    "mix_codes",
    "ContentEncoder",
    "EncoderConfig",
    "ContentFeaturePyramid",
    "FusionSite",
    "initialize_fusion",
    "VidToonModel",
    "assemble",
    "output_size",
]
