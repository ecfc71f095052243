"""Group-equivariant capsule networks with degree-centrality routing."""

from .groups import GroupElement, GroupGrid, compose, inverse, parse_element
from .network import ModelConfig, SOVNet, desk_config, micro_config
from .routing import degree_score, route_degree, squash
from .tensor import Tensor

__all__ = [
    "GroupElement",
    "GroupGrid",
    "ModelConfig",
    "SOVNet",
    "Tensor",
    "compose",
    "degree_score",
    "desk_config",
    "inverse",
    "micro_config",
    "parse_element",
    "route_degree",
    "squash",
]

__version__ = "0.1.0"
