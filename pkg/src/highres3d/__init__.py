"""Compact high-resolution 3D segmentation with dilated residual convolutions."""

from .network import (ArchitectureSpec, LayerSpec, ParameterStore, build_architecture, build_highres3dnet,
                      count_parameters, forward, highres3dnet_spec, init_parameters)
from .tensor import Tensor, make_rng, random_fill, zeros

__version__ = "0.1.0"

__all__ = [
    "ArchitectureSpec",
    "LayerSpec",
    "ParameterStore",
    "Tensor",
    "build_architecture",
    "build_highres3dnet",
    "count_parameters",
    "forward",
    "highres3dnet_spec",
    "init_parameters",
    "make_rng",
    "random_fill",
    "zeros",
]
