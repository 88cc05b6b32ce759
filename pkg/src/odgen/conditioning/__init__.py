"""Object-wise conditioning: text lists, image lists, prompts, masks and encoders."""
from .encoders import (
    ImageListEncoder,
    TextListEncoder,
    TokenHashEmbedder,
    encode_image_list,
    encode_text_list,
    image_encoder_channels,
    stack_image_lists,
    stack_text_embeddings,
    text_encoder_channels,
)
from .lists import (
    ConditionTriplet,
    ImageList,
    TextList,
    build_global_prompt,
    build_image_list,
    build_text_list,
    build_triplet,
    empty_triplet,
    object_prompt,
    paste_on_canvas,
    scene_prompt,
)
from .masks import boxes_to_mask, rasterize_foreground_mask
from .pool import ForegroundPool

__all__ = [
    "ConditionTriplet", "ForegroundPool", "ImageList", "ImageListEncoder", "TextList",
    "TextListEncoder", "TokenHashEmbedder", "boxes_to_mask", "build_global_prompt",
    "build_image_list", "build_text_list", "build_triplet", "empty_triplet",
    "encode_image_list", "encode_text_list", "image_encoder_channels", "object_prompt",
    "paste_on_canvas", "rasterize_foreground_mask", "scene_prompt", "stack_image_lists",
    "stack_text_embeddings", "text_encoder_channels",
]
