"""Continual category discovery with a fixed simplex-ETF prototype frame."""
from .data import StreamSpec, generate_stream, load_embeddings, export_embeddings
from .estimator import GoalDiscoverer, load_checkpoint, save_checkpoint
from .etf import AllocationLedger, EtfFrame, build_etf, ideal_gram, load_frame, save_frame
from .losses import LossConfig
from .metrics import discovery_rate, forgetting_rate, hungarian_accuracy, nc_diagnostics
from .session import PRESETS, TrainConfig, run_protocol

__all__ = [
    "AllocationLedger",
    "EtfFrame",
    "GoalDiscoverer",
    "LossConfig",
    "PRESETS",
    "StreamSpec",
    "TrainConfig",
    "build_etf",
    "discovery_rate",
    "export_embeddings",
    "forgetting_rate",
    "generate_stream",
    "hungarian_accuracy",
    "ideal_gram",
    "load_checkpoint",
    "load_embeddings",
    "load_frame",
    "nc_diagnostics",
    "run_protocol",
    "save_checkpoint",
    "save_frame",
]
