"""Label refinery: train classifiers on crop-level labels produced by earlier classifiers."""
__version__ = "0.1.0"

from .adversarial import AdversarialConfig, compose_batch, jitter
from .checkpoint import load_checkpoint, load_label_cache, save_checkpoint, save_label_cache
from .data import CropSpec, Dataset, extract_crop, load_dataset, make_dataset, sample_crop
from .estimator import RefineryClassifier
from .evaluation import MetricsRecord, audit_crops, gap_report, per_category_accuracy, topk_accuracy
from .exceptions import (
    CheckpointError,
    ConfigError,
    DegenerateBatchError,
    InvalidInputError,
    ProtocolError,
    RefineryError,
)
from .losses import LOSS_CHOICES, loss_from_logits, loss_grad_wrt_logits
from .nn import ARCHITECTURES, Classifier, build_arch
from .refinery import (
    PROVIDERS,
    ChainConfig,
    RefineryStage,
    StageConfig,
    TrainingSchedule,
    generate_labels,
    run_chain,
    train_stage,
)
from .taxonomy import TaxonomyTree, load_taxonomy

__all__ = [
    "ARCHITECTURES", "AdversarialConfig", "ChainConfig", "CheckpointError", "Classifier", "ConfigError",
    "CropSpec", "Dataset", "DegenerateBatchError", "InvalidInputError", "LOSS_CHOICES", "MetricsRecord",
    "PROVIDERS", "ProtocolError", "RefineryClassifier", "RefineryError", "RefineryStage", "StageConfig",
    "TaxonomyTree", "TrainingSchedule", "audit_crops", "build_arch", "compose_batch", "extract_crop",
    "gap_report", "generate_labels", "jitter", "load_checkpoint", "load_dataset", "load_label_cache",
    "load_taxonomy", "loss_from_logits", "loss_grad_wrt_logits", "make_dataset", "per_category_accuracy",
    "run_chain", "sample_crop", "save_checkpoint", "save_label_cache", "topk_accuracy", "train_stage",
]
