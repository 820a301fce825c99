"""Minimal tensor autodiff, MLPs and Adam."""

from bddm.nn.autodiff import Tape, Var, backward
from bddm.nn.mlp import MlpModel, init_mlp, mlp_forward, zeros_mlp
from bddm.nn.optim import AdamState, adam_step, clip_global_norm

__all__ = [
    "AdamState",
    "MlpModel",
    "Tape",
    "Var",
    "adam_step",
    "backward",
    "clip_global_norm",
    "init_mlp",
    "mlp_forward",
    "zeros_mlp",
]
