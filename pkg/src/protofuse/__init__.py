"""Prototype-augmented multimodal fusion for video-level binary
classification on precomputed modality embeddings."""

from .embedding_io import (
    MODALITIES,
    DatasetManifest,
    EmbeddingMatrix,
    SampleRecord,
    SynthSpec,
    generate_synthetic_dataset,
    load_manifest,
    read_embedding_file,
    write_embedding_file,
)
from .aggregation import PooledVector, mean_pool, statistical_pool
from .fusion_model import (
    FusionConfig,
    FusionModel,
    fusion_gradcheck,
    load_checkpoint,
    save_checkpoint,
)
from .trainer_eval import (
    DEFAULT_SEEDS,
    FusionDataset,
    MetricsReport,
    TrainConfig,
    ensemble_average,
    load_dataset,
    macro_f1,
    predict_dataset,
    seed_sweep,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "MODALITIES",
    "DEFAULT_SEEDS",
    "DatasetManifest",
    "EmbeddingMatrix",
    "SampleRecord",
    "SynthSpec",
    "PooledVector",
    "FusionConfig",
    "FusionModel",
    "FusionDataset",
    "MetricsReport",
    "TrainConfig",
    "generate_synthetic_dataset",
    "load_manifest",
    "read_embedding_file",
    "write_embedding_file",
    "mean_pool",
    "statistical_pool",
    "fusion_gradcheck",
    "load_checkpoint",
    "save_checkpoint",
    "ensemble_average",
    "load_dataset",
    "macro_f1",
    "predict_dataset",
    "seed_sweep",
    "train",
    "__version__",
]
