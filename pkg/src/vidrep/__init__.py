"""Video representation learning with self-attention and contrastive training.

The pipeline: convolutional feature maps are pooled and whitened into compact
unit-norm frame descriptors (`features`), refined by a single-layer
multi-head self-attention encoder with exact manual gradients (`encoder`),
trained against memory-bank contrastive objectives (`losses`, `trainer`),
and compared for retrieval with chamfer or cosine similarity plus mAP
evaluation (`retrieval`). `vidrep.cli` exposes the whole flow as the
``vidrep`` command.
"""

from .embedder import ContrastiveVideoEmbedder
from .encoder import (
    EncoderConfig,
    EncoderParams,
    aggregate_video,
    encode_frames,
    encoder_backward,
    init_encoder,
    mean_attention_response,
)
from .features import (
    DescriptorWhitener,
    FeatureMapStack,
    fit_whitening,
    frame_descriptor,
    frame_descriptor_sequence,
    imac_pool,
    l2_normalize,
    l3_irmac_pool,
    pool_stack,
)
from .losses import (
    CircleParams,
    LossOutput,
    ScoreSet,
    anchor_gradient_analytic,
    circle_loss,
    evaluate_loss,
    infonce_loss,
    negative_contribution,
    similarity_scores,
    softmax_loss,
)
from .retrieval import (
    EvaluationReport,
    average_precision,
    chamfer_similarity,
    cosine_similarity_video,
    mean_pairwise_similarity,
    rank_and_score,
    symmetric_chamfer,
)
from .synth import SyntheticSpec, generate
from .trainer import (
    AdamState,
    MemoryBank,
    TrainingConfig,
    VideoDataset,
    adam_update,
    epoch_steps,
    fit,
    lr_at,
    prepare_sequence,
    sample_negatives,
    step,
)
from .validation import (
    DataError,
    DegenerateInputError,
    DimensionMismatchError,
    InsufficientDataError,
    MalformedInputError,
    NumericalError,
    VidrepError,
)

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "CircleParams",
    "ContrastiveVideoEmbedder",
    "DataError",
    "DegenerateInputError",
    "DescriptorWhitener",
    "DimensionMismatchError",
    "EncoderConfig",
    "EncoderParams",
    "EvaluationReport",
    "FeatureMapStack",
    "InsufficientDataError",
    "LossOutput",
    "MalformedInputError",
    "MemoryBank",
    "NumericalError",
    "ScoreSet",
    "SyntheticSpec",
    "TrainingConfig",
    "VideoDataset",
    "VidrepError",
    "adam_update",
    "aggregate_video",
    "anchor_gradient_analytic",
    "average_precision",
    "chamfer_similarity",
    "circle_loss",
    "cosine_similarity_video",
    "encode_frames",
    "encoder_backward",
    "epoch_steps",
    "evaluate_loss",
    "fit",
    "fit_whitening",
    "frame_descriptor",
    "frame_descriptor_sequence",
    "generate",
    "imac_pool",
    "infonce_loss",
    "init_encoder",
    "l2_normalize",
    "l3_irmac_pool",
    "lr_at",
    "mean_attention_response",
    "mean_pairwise_similarity",
    "negative_contribution",
    "pool_stack",
    "prepare_sequence",
    "rank_and_score",
    "sample_negatives",
    "similarity_scores",
    "softmax_loss",
    "step",
    "symmetric_chamfer",
]
