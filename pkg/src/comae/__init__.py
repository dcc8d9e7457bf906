"""Attribute-driven zero-shot hashing: training, encoding, and retrieval evaluation."""

from .backbone import ConvBackbone, IdentityBackbone, global_average_pool
from .classwise import CompatibilityHead, classwise_loss, classwise_loss_literal
from .contrast import PairSets, build_pair_sets, pairwise_loss
from .data import (
    AttributedDataset,
    DatasetFormatError,
    SplitSpec,
    load_dataset,
    make_split,
    make_synthetic,
    save_dataset,
)
from .estimator import (
    Checkpoint,
    ComaeHasher,
    ComaeNetwork,
    NonFiniteLossError,
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    write_loss_trace,
)
from .evaluation import (
    CodeDatabase,
    RetrievalCurves,
    SeparabilityReport,
    curves,
    hamming,
    interpolated_precision,
    mean_average_precision,
    rank,
    separability,
    zero_shot_map,
    zero_shot_protocol,
)
from .hashing import (
    HashHead,
    binarize,
    hypersphere_loss,
    pack_codes,
    total_loss,
    unpack_codes,
)
from .prototypes import PrototypeBank, pointwise_loss, spatial_max

__version__ = "0.1.0"

__all__ = [
    "AttributedDataset",
    "Checkpoint",
    "CodeDatabase",
    "ComaeHasher",
    "ComaeNetwork",
    "CompatibilityHead",
    "ConvBackbone",
    "DatasetFormatError",
    "HashHead",
    "IdentityBackbone",
    "NonFiniteLossError",
    "PairSets",
    "PrototypeBank",
    "RetrievalCurves",
    "SeparabilityReport",
    "SplitSpec",
    "TrainConfig",
    "binarize",
    "build_pair_sets",
    "classwise_loss",
    "classwise_loss_literal",
    "curves",
    "global_average_pool",
    "hamming",
    "hypersphere_loss",
    "interpolated_precision",
    "load_checkpoint",
    "load_dataset",
    "make_split",
    "make_synthetic",
    "mean_average_precision",
    "pack_codes",
    "pairwise_loss",
    "pointwise_loss",
    "rank",
    "save_checkpoint",
    "save_dataset",
    "separability",
    "spatial_max",
    "total_loss",
    "unpack_codes",
    "write_loss_trace",
    "zero_shot_map",
    "zero_shot_protocol",
]
