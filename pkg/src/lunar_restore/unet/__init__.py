from .model import (
    UNetConfig,
    check_params,
    count_params,
    forward,
    forward_trace,
    init_params,
    layer_specs,
    loss_and_grads,
    param_shapes,
)

__all__ = [
    "UNetConfig",
    "check_params",
    "count_params",
    "forward",
    "forward_trace",
    "init_params",
    "layer_specs",
    "loss_and_grads",
    "param_shapes",
]
