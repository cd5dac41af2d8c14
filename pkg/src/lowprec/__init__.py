"""Low-precision training toolkit: int8/fp8 linear layers, StableAdamW and spike analysis."""
from .linear import LinearMode, linear_backward, linear_forward
from .model import LayerScale, ModelConfig
from .optim import LossScaler, OptimizerHyperparams, step
from .quantize import E4M3, E5M2, dequantize, quantize, quantize_fp8, quantize_rowwise, quantize_tensorwise
from .stability import SpikeThresholds, TrainTrace, analyze_trace
from .train import TrainConfig, load_config, run_training

__version__ = "0.1.0"

__all__ = [
    "E4M3", "E5M2", "LayerScale", "LinearMode", "LossScaler", "ModelConfig", "OptimizerHyperparams",
    "SpikeThresholds", "TrainConfig", "TrainTrace", "analyze_trace", "dequantize", "linear_backward",
    "linear_forward", "load_config", "quantize", "quantize_fp8", "quantize_rowwise", "quantize_tensorwise",
    "run_training", "step",
]
