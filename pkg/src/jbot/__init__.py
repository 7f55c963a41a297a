"""Self-distillation pre-training for particle jets, with probing,
fine-tuning and embedding-space anomaly detection."""
from .augment import AugmentConfig
from .distill import DistillConfig, pretrain
from .jetdata import JetDataset, SyntheticSpec, generate_synthetic, load_dataset
from .network import NetworkConfig

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig",
    "DistillConfig",
    "JetDataset",
    "NetworkConfig",
    "SyntheticSpec",
    "generate_synthetic",
    "load_dataset",
    "pretrain",
]
