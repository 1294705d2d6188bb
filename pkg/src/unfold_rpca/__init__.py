"""Deep-unfolded robust PCA for infrared small target detection."""

from .data import DatasetSample, SynthSceneSpec, load_dataset, synth_dataset, synth_scene, write_dataset
from .metrics import MetricsReport, evaluate, roc_sweep
from .model import ModelConfig, RPCANet
from .rpca import PcpSettings, ipi_detect, pcp_decompose, soft_threshold, svt, tophat_detect
from .train import TrainConfig, load_checkpoint, save_checkpoint, total_loss, train

__version__ = "0.1.0"

__all__ = [
    "DatasetSample",
    "MetricsReport",
    "ModelConfig",
    "PcpSettings",
    "RPCANet",
    "SynthSceneSpec",
    "TrainConfig",
    "evaluate",
    "ipi_detect",
    "load_checkpoint",
    "load_dataset",
    "pcp_decompose",
    "roc_sweep",
    "save_checkpoint",
    "soft_threshold",
    "svt",
    "synth_dataset",
    "synth_scene",
    "tophat_detect",
    "total_loss",
    "train",
    "write_dataset",
]
