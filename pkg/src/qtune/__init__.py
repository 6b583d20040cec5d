"""Trainable JPEG quantization tables co-optimized with an image classifier."""

from .classifier import Classifier, ClassifierConfig, build_classifier, topk_accuracy
from .data import Dataset, DatasetSpec, ingest_dataset, make_synthetic
from .entropy import HuffmanCodec, RateReport, build_huffman_tables, export_qtables, measure_rate
from .jpeg import ColorTransform, CompressionKernels, decode_pipeline, encode_pipeline
from .losses import LossConfig, quan_penalty, total_loss
from .metrics import psnr, ssim
from .trainer import Checkpoint, EvalResult, TrainConfig, Trainer, evaluate, lr_at

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "Classifier",
    "ClassifierConfig",
    "ColorTransform",
    "CompressionKernels",
    "Dataset",
    "DatasetSpec",
    "EvalResult",
    "HuffmanCodec",
    "LossConfig",
    "RateReport",
    "TrainConfig",
    "Trainer",
    "build_classifier",
    "build_huffman_tables",
    "decode_pipeline",
    "encode_pipeline",
    "evaluate",
    "export_qtables",
    "ingest_dataset",
    "lr_at",
    "make_synthetic",
    "measure_rate",
    "psnr",
    "quan_penalty",
    "ssim",
    "topk_accuracy",
    "total_loss",
]
