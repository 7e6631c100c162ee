"""Data pipeline: metadata ingestion, manifests, imaging, sampling."""

from .manifest import (
    CLASS_NAMES,
    DISPLAY_NAMES,
    ClassLabel,
    ExclusionReport,
    ImageRecord,
    build_manifest,
    parse_class,
    patient_level_split,
    read_manifest,
    read_metadata,
    write_manifest,
)
from .imaging import (
    AugmentationConfig,
    apply_body_mask,
    augment_sample,
    find_body_region,
    load_image,
    rng_for_sample,
    save_image_png,
)
from .sampler import rebalanced_batches
from .synthetic import generate_synthetic_dataset

__all__ = [
    "AugmentationConfig",
    "CLASS_NAMES",
    "ClassLabel",
    "DISPLAY_NAMES",
    "ExclusionReport",
    "ImageRecord",
    "apply_body_mask",
    "augment_sample",
    "build_manifest",
    "find_body_region",
    "generate_synthetic_dataset",
    "load_image",
    "parse_class",
    "patient_level_split",
    "read_manifest",
    "read_metadata",
    "rebalanced_batches",
    "rng_for_sample",
    "save_image_png",
    "write_manifest",
]
