from .io import (
    FormatError,
    load_dataset,
    load_features,
    load_manifest,
    save_dataset,
    save_features,
)
from .schema import (
    DEFAULT_CLIP_DURATION,
    ClipFeatureSequence,
    IndexSpan,
    MomentDataset,
    QueryAnnotation,
    SynthConfig,
    ValidationError,
    hull_span,
    span_to_window,
    validate_annotation,
    window_to_span,
)
from .surgery import (
    InsufficientDataError,
    build_dynamic_context_split,
    mask_target_moment,
    masked_dataset,
    target_mask,
)
from .synthetic import generate_synthetic, synthetic_dataset
