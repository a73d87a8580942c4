"""Dataset build, split, training and evaluation orchestration."""

from .records import (
    DatasetManifest,
    ManifestEntry,
    SampleRecord,
    decode_record,
    encode_record,
    load_samples,
    read_record_at,
)
from .generate import generate_dataset
from .split import split_dataset
from .training import TARGET_CLAMP, TrainResult, train
from .evaluate import MetricsReport, SplitMetrics, evaluate, split_metrics

__all__ = [
    "DatasetManifest",
    "ManifestEntry",
    "MetricsReport",
    "SampleRecord",
    "SplitMetrics",
    "TARGET_CLAMP",
    "TrainResult",
    "decode_record",
    "encode_record",
    "evaluate",
    "generate_dataset",
    "load_samples",
    "read_record_at",
    "split_dataset",
    "split_metrics",
    "train",
]
