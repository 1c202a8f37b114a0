"""Tensor graph engine: static DAG, NHWC kernels, reverse-mode gradients."""

from .graph import (
    Constant,
    GraphError,
    IntPlaceholder,
    Node,
    NonFiniteError,
    ParamEntry,
    ParamStore,
    Parameter,
    Placeholder,
    ShapeError,
    backward,
    deterministic,
    evaluate,
    set_check_finite,
    set_deterministic,
    topo_order,
)
from .ops import (
    Add,
    AvgPool2x2,
    BatchNorm,
    BregMap,
    Conv2D,
    Dense,
    Elu,
    FixedMap,
    FocalLoss,
    GlobalAvgPool,
    MeanAll,
    MseLoss,
    Mul,
    PadChannels,
    Scale,
    Softmax,
    SumAll,
)
from .gradcheck import finite_difference_gradient, max_relative_error

__all__ = [
    "Add", "AvgPool2x2", "BatchNorm", "BregMap", "Constant", "Conv2D",
    "Dense", "Elu", "FixedMap", "FocalLoss", "GlobalAvgPool", "GraphError",
    "IntPlaceholder", "MeanAll", "MseLoss", "Mul", "Node", "NonFiniteError",
    "PadChannels", "ParamEntry", "ParamStore", "Parameter", "Placeholder",
    "Scale", "ShapeError", "Softmax", "SumAll", "backward", "deterministic",
    "evaluate", "finite_difference_gradient", "max_relative_error",
    "set_check_finite", "set_deterministic", "topo_order",
]
