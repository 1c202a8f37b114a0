"""bregnext: a self-contained micro deep-learning engine built around
bounded-gradient residual bypass mappings, with desk-scale training,
evaluation metrics, and finite-difference verification tooling."""

from . import autodiff, builder, data, mappings, metrics, training
from .builder import (NetworkConfig, build_network, count_flops,
                      count_parameters, depth_config, table2_config)
from .mappings import (ALPHA_LIMIT_SWITCH, ALPHA_MIN, MappingKind,
                       MappingParams, breg_derivative, breg_forward,
                       breg_param_gradients, grad_path_product,
                       mapping_derivative, mapping_eval)
from .metrics import cc, ccc, class_report, rmse, sagr
from .training import (AugmentConfig, FocalLossConfig, OptimizerState,
                       adam_step, focal_loss, lr_at_epoch, train_epochs)

__version__ = "1.0.0"

__all__ = [
    "autodiff", "builder", "data", "mappings", "metrics", "training",
    "NetworkConfig", "build_network", "count_flops", "count_parameters",
    "depth_config", "table2_config",
    "ALPHA_LIMIT_SWITCH", "ALPHA_MIN", "MappingKind", "MappingParams",
    "breg_derivative", "breg_forward", "breg_param_gradients",
    "grad_path_product", "mapping_derivative", "mapping_eval",
    "cc", "ccc", "class_report", "rmse", "sagr",
    "AugmentConfig", "FocalLossConfig", "OptimizerState", "adam_step",
    "focal_loss", "lr_at_epoch", "train_epochs",
    "__version__",
]
