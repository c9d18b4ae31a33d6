"""Carpet map design studio: chained neural style transfer for Persian
carpet charts, with a job service and CLI on top of the library."""

from .cams import (
    CamsConfig,
    cams_style_loss,
    color_masks,
    extract_palette,
    merge_palettes,
    resize_masks,
    run_cams,
    weighted_gram,
)
from .clip_styler import (
    ClipStylerConfig,
    StyleText,
    directional_loss,
    patch_clip_loss,
    run_clip_styler,
)
from .features import EncoderHandle, ModelBundle, StubEmbedder, load_models
from .gatys import GatysConfig, content_loss, gram_matrix, run_gatys, style_loss, total_loss
from .image_io import load_image, resize, save_image, to_grayscale
from .pipeline import (
    PipelineArtifacts,
    PipelineConfig,
    colorize,
    generate,
    parse_config,
    run_pipeline,
    validate_config,
)
from .style_swap import (
    PatchGrid,
    SwapConfig,
    extract_patches,
    match_patches,
    reassemble,
    run_style_swap,
)

__version__ = "0.1.0"

__all__ = [
    "CamsConfig", "ClipStylerConfig", "EncoderHandle", "GatysConfig",
    "ModelBundle", "PatchGrid", "PipelineArtifacts", "PipelineConfig",
    "StubEmbedder", "StyleText", "SwapConfig", "cams_style_loss",
    "color_masks", "colorize", "content_loss", "directional_loss",
    "extract_palette", "extract_patches", "generate", "gram_matrix",
    "load_image", "load_models", "match_patches", "merge_palettes",
    "parse_config", "patch_clip_loss", "reassemble", "resize",
    "resize_masks", "run_cams", "run_clip_styler", "run_gatys",
    "run_pipeline", "run_style_swap", "save_image", "style_loss",
    "to_grayscale", "total_loss", "validate_config", "weighted_gram",
]
