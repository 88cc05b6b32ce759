"""odgen: object-wise conditioned diffusion for synthesizing object detection datasets."""
from .config import PipelineConfig, load_config
from .core import (
    Annotation,
    BBox,
    DetectionDataset,
    LabeledImage,
    clip_bbox,
    derive_geometry,
    iou,
)
from .filtering import (
    ForegroundDiscriminator,
    crop_patches,
    filter_pseudo_labels,
    train_discriminator,
)
from .metrics import compute_fid, frechet_distance, layout_consistency
from .pipeline import (
    STAGES,
    SynthesisReport,
    run_pipeline,
    run_stage,
    synthesize_dataset,
)
from .stats import (
    LayoutSampler,
    PseudoLabel,
    estimate_box_stats,
    estimate_count_stats,
    sample_pseudo_label,
)
from .yolo import export_yolo_dataset, parse_yolo_dataset

__version__ = "0.1.0"

__all__ = [
    "Annotation", "BBox", "DetectionDataset", "ForegroundDiscriminator", "LabeledImage", "LayoutSampler",
    "PipelineConfig", "PseudoLabel", "STAGES", "SynthesisReport", "clip_bbox", "compute_fid",
    "crop_patches", "derive_geometry", "estimate_box_stats", "estimate_count_stats",
    "export_yolo_dataset", "filter_pseudo_labels", "frechet_distance", "iou", "layout_consistency",
    "load_config", "parse_yolo_dataset", "run_pipeline", "run_stage", "sample_pseudo_label",
    "synthesize_dataset", "train_discriminator",
]
