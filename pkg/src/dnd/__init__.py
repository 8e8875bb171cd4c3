"""Dynamic nested depth: token-choice re-processing of critical tokens inside a decoder layer."""

from .autodiff import Tensor, grad_check
from .config import DndConfig, load_config
from .controller import ControllerConfig
from .dnd_layer import RouterState, SelectionMask, dnd_layer_forward
from .flops import FlopsParams, overhead_report
from .model import DndModel
from .objectives import combined_loss
from .transformer import ModelConfig

__all__ = [
    "ControllerConfig",
    "DndConfig",
    "DndModel",
    "FlopsParams",
    "ModelConfig",
    "RouterState",
    "SelectionMask",
    "Tensor",
    "combined_loss",
    "dnd_layer_forward",
    "grad_check",
    "load_config",
    "overhead_report",
]
