"""Transformer with depth-wise LSTM connections, plus a residual baseline,
training recipe, synthetic tasks, and a layer-linearity probe."""

from .dwlstm import DepthState, dwlstm_step, init_state
from .model import Model, ModelConfig, beam_decode, build_model, greedy_decode
from .tasks import TaskConfig
from .training import OptimHyper, train

__all__ = [
    "DepthState",
    "Model",
    "ModelConfig",
    "OptimHyper",
    "TaskConfig",
    "beam_decode",
    "build_model",
    "dwlstm_step",
    "greedy_decode",
    "init_state",
    "train",
]
