"""Dense float32 compute with reverse-mode gradients."""
from mera.nnkernel._kernels import BACKEND
from mera.nnkernel.graph import DTYPE, Graph, Node, ParameterSet, glorot_uniform
from mera.nnkernel.optim import OptimizerState, lr_multiplier, optimizer_step

__all__ = [
    "BACKEND",
    "DTYPE",
    "Graph",
    "Node",
    "OptimizerState",
    "ParameterSet",
    "glorot_uniform",
    "lr_multiplier",
    "optimizer_step",
]
