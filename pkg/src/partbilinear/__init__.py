"""Part-aligned bilinear embeddings for re-identification matching."""

from .core import (
    DISTRACTOR_ID,
    DatasetManifest,
    Embedding,
    ExactLayout,
    FeatureMap,
    ImageSample,
    ManifestEntry,
    PlainLayout,
    Role,
    SketchedLayout,
    Split,
    descriptor_at,
    validate_map,
)
from .estimators import (
    BilinearPooler,
    CompactBilinearPooler,
    GlobalAveragePooler,
    PartAlignedEmbedder,
    stack_maps,
)
from .evaluation import EvalReport, LabeledEmbeddings, evaluate, evaluate_multi_trial, multi_query_fuse
from .matching import RankedResult, rank_gallery, similarity
from .pooling import bilinear_pool, box_indicator_partmap, normalize
from .sketch import SketchParams, compact_bilinear_pool, estimate_inner_product

__version__ = "0.1.0"
