"""Masked vehicle autoencoder with structural and semantic priors.

A NumPy implementation of masked-image pre-training for vehicle imagery:
a ViT-style encoder/decoder trained on masked-pixel reconstruction, guided
by sketch-token distillation through the shared encoder and by alignment to
a frozen external embedder, plus the downstream evaluation stack (linear
probes, fine-tuning, attribute / retrieval / segmentation metrics).
"""

from .backbone import (
    FeatureBundle,
    ModelConfig,
    ModelParams,
    decode,
    encode,
    forward_sketch,
    init_params,
    param_shapes,
)
from .dataio import (
    ATTRIBUTE_NAMES,
    Batch,
    DatasetManifest,
    ManifestRecord,
    decode_attributes,
    generate_synthetic,
    load_manifest,
    make_batches,
    save_manifest,
)
from .downstream import (
    MetricReport,
    ProbeConfig,
    attribute_metrics,
    extract_features,
    finetune,
    linear_probe,
    multiclass_accuracy,
    reid_report,
    retrieval_metrics,
    segmentation_metrics,
)
from .errors import (
    CheckpointError,
    ConfigError,
    InputError,
    NumericError,
    ParameterError,
    ParseError,
    StructuralError,
    VmaeError,
)
from .pretrainer import (
    EmbedderSpec,
    LossBreakdown,
    LossToggles,
    LossWeights,
    RunConfig,
    TrainSettings,
    TrainState,
    adamw_step,
    cosine_warmup_lr,
    init_train_state,
    load_checkpoint,
    pretrain,
    reconstruction_loss,
    save_checkpoint,
    total_loss,
    train_step,
)
from .semantic_prior import (
    StubEmbedder,
    TextEmbeddingBank,
    consistency_loss,
    entropy,
    feature_align_loss,
    kl_divergence,
    load_embedding_bank,
    save_embedding_bank,
    similarity_distribution,
)
from .structural_prior import (
    DistillHeads,
    build_sketch_tokens,
    cls_distill_loss,
    extract_edges,
    patch_distill_loss,
)
from .tokenizer import (
    MaskPlan,
    PatchSequence,
    TokenEmbeddings,
    embed_patches,
    full_visible_mask,
    patchify,
    sample_mask,
    unpatchify,
)

__version__ = "0.1.0"

__all__ = [
    "ATTRIBUTE_NAMES",
    "Batch",
    "CheckpointError",
    "ConfigError",
    "DatasetManifest",
    "DistillHeads",
    "EmbedderSpec",
    "FeatureBundle",
    "InputError",
    "LossBreakdown",
    "LossToggles",
    "LossWeights",
    "ManifestRecord",
    "MaskPlan",
    "MetricReport",
    "ModelConfig",
    "ModelParams",
    "NumericError",
    "ParameterError",
    "ParseError",
    "PatchSequence",
    "ProbeConfig",
    "RunConfig",
    "StructuralError",
    "StubEmbedder",
    "TextEmbeddingBank",
    "TokenEmbeddings",
    "TrainSettings",
    "TrainState",
    "VmaeError",
    "adamw_step",
    "attribute_metrics",
    "build_sketch_tokens",
    "cls_distill_loss",
    "consistency_loss",
    "cosine_warmup_lr",
    "decode",
    "decode_attributes",
    "embed_patches",
    "encode",
    "entropy",
    "extract_edges",
    "extract_features",
    "feature_align_loss",
    "finetune",
    "forward_sketch",
    "full_visible_mask",
    "generate_synthetic",
    "init_params",
    "init_train_state",
    "kl_divergence",
    "linear_probe",
    "load_checkpoint",
    "load_embedding_bank",
    "load_manifest",
    "make_batches",
    "multiclass_accuracy",
    "param_shapes",
    "patch_distill_loss",
    "patchify",
    "pretrain",
    "reconstruction_loss",
    "reid_report",
    "retrieval_metrics",
    "sample_mask",
    "save_checkpoint",
    "save_embedding_bank",
    "save_manifest",
    "segmentation_metrics",
    "similarity_distribution",
    "total_loss",
    "train_step",
    "unpatchify",
]
