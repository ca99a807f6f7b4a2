"""Graph symmetric attention and symmetry-invariant transformers."""

from .attention import GraphSymmetricAttention, GSAConfig, rotation_triangle_layer, standard_attention
from .errors import ConfigError, ShapeError
from .graph import GraphWeights, apply_conv, apply_dense, symmetric_dropout
from .grid import GridSpec, Variant, declared_group, edge_classes, triangle_map
from .model import LayerSymmetry, SiTConfig, SymmetryInvariantTransformer, build_model

__all__ = [
    "ConfigError",
    "GSAConfig",
    "GraphSymmetricAttention",
    "GraphWeights",
    "GridSpec",
    "LayerSymmetry",
    "ShapeError",
    "SiTConfig",
    "SymmetryInvariantTransformer",
    "Variant",
    "apply_conv",
    "apply_dense",
    "build_model",
    "declared_group",
    "edge_classes",
    "rotation_triangle_layer",
    "standard_attention",
    "symmetric_dropout",
    "triangle_map",
]
