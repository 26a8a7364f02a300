"""Dual-task segmentation and T2 quantification network."""
from .sqnet import ABLATIONS, DualOutput, ModelConfig, SQNet

__all__ = ["ABLATIONS", "DualOutput", "ModelConfig", "SQNet"]
